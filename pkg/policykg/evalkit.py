# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Evaluation: question sets, heuristic scorers and LLM judge. """

import json
import logging
import re
import typing

from pathlib import Path

import numpy

from policykg.llm import (TOKEN_RE, ChatMessage, ChatProvider, ChatRequest,
                          ProviderError)
from policykg.model import DATA_DIR
from policykg.prompts import PromptLibrary
from policykg.synthesis import TASK_TYPES, Condition, Pipeline, run_condition


DEFAULT_QUESTIONS = DATA_DIR / 'toy_questions.jsonl'
JUDGE_TEMPERATURE = 0.1
JUDGE_DIMENSIONS = ('accuracy', 'completeness', 'relevance')
CONDITIONS = ('NC', 'AIRO', 'OPEN')
BINARY_LABELS = ('yes', 'no', 'partial')
DISTINCTIVE_MIN_LEN = 5

BULLET_RE = re.compile(r'^\s*(?:[-*•]|\d+[.)])\s*')
SEGMENT_SPLIT_RE = re.compile(r'[\n;]|\s+(?=•|\d{1,2}\)\s)')
LEADING_NOISE_RE = re.compile(r'^[\W_]+')
FIRST_WORD_RE = re.compile(r'[a-z]+')
VERDICT_PREFIXES = ('answer:', 'verdict:', 'compliance:')
FIRST_WORD_LABELS = {
    'yes': 'yes',
    'no': 'no',
    'partial': 'partial',
    'partially': 'partial',
}
# checked in this order: negative and partial phrases contain
# the positive ones
SIGNAL_PHRASES = (
    ('partial', ('partially compliant', 'partially complies')),
    ('no', ('not compliant', 'does not comply', 'fails to comply',
            'violates')),
    ('yes', ('is compliant', 'complies with', 'meets the requirement')),
)
JUDGE_RES = {dim: re.compile(rf'{dim}\s*[:=]\s*(\d+)', re.IGNORECASE)
             for dim in JUDGE_DIMENSIONS}
JUDGE_REPROMPT = ('Your reply could not be parsed: {error}\n'
                  'Reply in exactly this format, with integers 1-5:\n'
                  'accuracy: N\ncompleteness: N\nrelevance: N')

REQUIRED_FIELDS = {
    'T1': ('expected_answer',),
    'T2': ('expected_items',),
    'T3': ('expected_answer',),
    'T4': (),
    'T5': ('expected_label',),
    'T6': ('expected_mappings',),
}
ALLOWED_FIELDS = {
    'T1': ('expected_answer',),
    'T2': ('expected_items',),
    'T3': ('expected_answer',),
    'T4': ('expected_answer', 'expected_items'),
    'T5': ('expected_label',),
    'T6': ('expected_mappings',),
}
EXPECTATION_FIELDS = ('expected_answer', 'expected_items',
                      'expected_label', 'expected_mappings')

log = logging.getLogger('policykg')


class ScorerError(ValueError):
    pass


class JudgeParseError(ValueError):
    pass


class QuestionFormatError(ValueError):
    pass


class ExpectedMapping(typing.NamedTuple):
    name: str
    key_terms: typing.List[str]


class EvalQuestion(typing.NamedTuple):
    id: str
    task_type: str
    question: str
    expected_answer: typing.Optional[str] = None
    expected_items: typing.Optional[typing.List[str]] = None
    expected_label: typing.Optional[str] = None
    expected_mappings: typing.Optional[typing.List[ExpectedMapping]] = None
    policy_excerpt: str = ''
    source_refs: typing.List[str] = []

    @property
    def reference_answer(self) -> str:
        """Reference answer text shown to the judge"""
        parts = []
        if self.expected_label is not None:
            parts.append(self.expected_label.capitalize() + '.')
        if self.expected_answer is not None:
            parts.append(self.expected_answer)
        if self.expected_items is not None:
            parts.extend(f'- {x}' for x in self.expected_items)
        if self.expected_mappings is not None:
            parts.extend(f'- {m.name} ({", ".join(m.key_terms)})'
                         for m in self.expected_mappings)
        return '\n'.join(parts)


class JudgeScores(typing.NamedTuple):
    accuracy: int
    completeness: int
    relevance: int

    @property
    def composite(self) -> float:
        return (self.accuracy + self.completeness + self.relevance) / 3


class ScoreRecord(typing.NamedTuple):
    question_id: str
    condition: str
    run_index: int
    heuristic: float
    judge: typing.Optional[JudgeScores] = None
    task_type: str = ''
    path: str = 'none'
    evidence_count: int = 0
    evidence_sources: int = 0
    answer: str = ''
    error: str = ''

    def to_json(self) -> typing.Dict[str, typing.Any]:
        data = self._asdict()
        if self.judge is not None:
            data['judge'] = dict(self.judge._asdict(),
                                 composite=self.judge.composite)
        return data


class Cell(typing.NamedTuple):
    h_mean: float
    h_std: float
    j_mean: typing.Optional[float]
    j_std: typing.Optional[float]


class EvalTable(typing.NamedTuple):
    cells: typing.Dict[str, typing.Dict[str, Cell]]
    overall: typing.Dict[str, Cell]


def tokenize(text: str) -> typing.List[str]:
    return TOKEN_RE.findall(text.casefold())


def question_from_json(data: typing.Mapping[str, typing.Any],
                       require_excerpt: bool = False
                       ) -> EvalQuestion:
    """
    Build an EvalQuestion, checking that exactly the expectation
    fields of its task type are present and that every expectation
    can be scored.  With `require_excerpt`, a policy excerpt (needed
    by the judge) is mandatory.  Raises QuestionFormatError.
    """

    unknown = set(data) - set(EvalQuestion._fields)
    if unknown:
        raise QuestionFormatError(f'unknown fields: {sorted(unknown)}')
    for key in ('id', 'task_type', 'question'):
        if not isinstance(data.get(key), str) or not data[key]:
            raise QuestionFormatError(f'missing or invalid {key!r}')
    task_type = data['task_type']
    if task_type not in REQUIRED_FIELDS:
        raise QuestionFormatError(f'invalid task type: {task_type!r}')

    present = [k for k in EXPECTATION_FIELDS if data.get(k) is not None]
    for k in REQUIRED_FIELDS[task_type]:
        if k not in present:
            raise QuestionFormatError(f'{task_type} question lacks {k}')
    for k in present:
        if k not in ALLOWED_FIELDS[task_type]:
            raise QuestionFormatError(
                f'{task_type} question must not carry {k}')
    if not present:
        raise QuestionFormatError(f'{task_type} question has no '
                                  f'expectation')

    mappings = None
    try:
        if data.get('expected_mappings') is not None:
            mappings = [ExpectedMapping(str(m['name']),
                                        [str(t) for t in m['key_terms']])
                        for m in data['expected_mappings']]
            if not mappings or any(not m.key_terms for m in mappings):
                raise QuestionFormatError('empty mapping list or key terms')
            if any(not t.strip() for m in mappings for t in m.key_terms):
                raise QuestionFormatError('blank key term')
        if data.get('expected_items') is not None:
            if (not data['expected_items']
                    or not all(isinstance(x, str) and x.strip()
                               for x in data['expected_items'])):
                raise QuestionFormatError('invalid expected_items')
    except (KeyError, TypeError) as e:
        raise QuestionFormatError(f'invalid expected_mappings: {e!r}')
    answer = data.get('expected_answer')
    if answer is not None and (not isinstance(answer, str)
                               or not tokenize(answer)):
        raise QuestionFormatError(f'expected_answer has no words: '
                                  f'{answer!r}')
    label = data.get('expected_label')
    if label is not None and label not in BINARY_LABELS:
        raise QuestionFormatError(f'invalid expected_label: {label!r}')
    excerpt = data.get('policy_excerpt', '')
    if not isinstance(excerpt, str):
        raise QuestionFormatError('invalid policy_excerpt')
    if require_excerpt and not excerpt.strip():
        raise QuestionFormatError('judging requires a policy_excerpt')

    return EvalQuestion(
        id=data['id'],
        task_type=task_type,
        question=data['question'],
        expected_answer=data.get('expected_answer'),
        expected_items=data.get('expected_items'),
        expected_label=label,
        expected_mappings=mappings,
        policy_excerpt=excerpt,
        source_refs=list(data.get('source_refs', [])))


def load_questions(path: typing.Optional[Path] = None,
                   require_excerpt: bool = False
                   ) -> typing.List[EvalQuestion]:
    """Load a JSON-Lines question file (blank lines are ignored)"""
    path = path or DEFAULT_QUESTIONS
    questions = []
    ids: typing.Set[str] = set()
    with open(path, 'r') as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                q = question_from_json(json.loads(line), require_excerpt)
            except json.JSONDecodeError as e:
                raise QuestionFormatError(f'{path}:{lineno}: invalid JSON: '
                                          f'{e}')
            except QuestionFormatError as e:
                raise QuestionFormatError(f'{path}:{lineno}: {e}')
            if q.id in ids:
                raise QuestionFormatError(f'{path}:{lineno}: duplicate '
                                          f'question id {q.id!r}')
            ids.add(q.id)
            questions.append(q)
    return questions


def score_word_overlap(expected: str, generated: str) -> float:
    """Share of unique expected tokens present in `generated`"""
    expected_tokens = set(tokenize(expected))
    if not expected_tokens:
        raise ScorerError('expected answer has no tokens')
    return (len(expected_tokens & set(tokenize(generated)))
            / len(expected_tokens))


def item_matches(item: str,
                 text: str,
                 text_tokens: typing.AbstractSet[str]
                 ) -> bool:
    """
    Check whether expected `item` occurs in case-folded `text`

    Either the whole item is a substring, or at least two of its
    distinctive words (longer than 4 characters) are tokens of the
    text.  Items with a single distinctive word need that word.
    """

    folded = item.casefold().strip()
    if folded and folded in text:
        return True
    words = set(t for t in tokenize(item) if len(t) >= DISTINCTIVE_MIN_LEN)
    if not words:
        return False
    return len(words & text_tokens) >= min(2, len(words))


def segment_response(generated: str) -> typing.List[str]:
    """Split a response into candidate items"""
    ret = []
    for segment in SEGMENT_SPLIT_RE.split(generated):
        segment = BULLET_RE.sub('', segment).strip()
        if segment:
            ret.append(segment)
    return ret


def score_set_match(expected_items: typing.Sequence[str],
                    generated: str
                    ) -> float:
    """
    F1 of expected items against response items

    Recall counts expected items found in the whole response.
    Precision counts response segments matching some expected item;
    if the response does not split into more than one segment,
    precision equals recall.
    """

    if not expected_items:
        raise ScorerError('no expected items')
    text = generated.casefold()
    tokens = set(tokenize(generated))
    recall = (sum(1 for x in expected_items
                  if item_matches(x, text, tokens))
              / len(expected_items))

    candidates = segment_response(generated)
    if len(candidates) <= 1:
        precision = recall
    else:
        precision = sum(
            1 for c in candidates
            if any(item_matches(x, c.casefold(), set(tokenize(c)))
                   for x in expected_items)) / len(candidates)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def detect_verdict(generated: str) -> typing.Optional[str]:
    """Detect yes/no/partial verdict of a compliance answer"""
    text = generated.casefold()
    while True:
        stripped = LEADING_NOISE_RE.sub('', text)
        for prefix in VERDICT_PREFIXES:
            if stripped.startswith(prefix):
                stripped = stripped[len(prefix):]
        if stripped == text:
            break
        text = stripped

    m = FIRST_WORD_RE.match(text)
    if m is not None and m.group(0) in FIRST_WORD_LABELS:
        return FIRST_WORD_LABELS[m.group(0)]
    for label, phrases in SIGNAL_PHRASES:
        if any(p in text for p in phrases):
            return label
    return None


def score_binary(expected_label: str, generated: str) -> float:
    if expected_label not in BINARY_LABELS:
        raise ScorerError(f'invalid expected label: {expected_label!r}')
    return 1.0 if detect_verdict(generated) == expected_label else 0.0


def score_mapping(expected_mappings: typing.Sequence[ExpectedMapping],
                  generated: str
                  ) -> float:
    """
    Share of mappings with at least two key terms (or the only one)
    present in `generated`, case-insensitively
    """

    if not expected_mappings:
        raise ScorerError('no expected mappings')
    text = generated.casefold()
    satisfied = 0
    for m in expected_mappings:
        if not m.key_terms:
            raise ScorerError(f'mapping {m.name!r} has no key terms')
        found = sum(1 for t in m.key_terms if t.casefold() in text)
        if found >= min(2, len(m.key_terms)):
            satisfied += 1
    return satisfied / len(expected_mappings)


def score_heuristic(question: EvalQuestion, generated: str) -> float:
    """Dispatch to the heuristic scorer of the question's task type"""
    t = question.task_type
    if t in ('T1', 'T3'):
        assert question.expected_answer is not None
        return score_word_overlap(question.expected_answer, generated)
    elif t == 'T2':
        assert question.expected_items is not None
        return score_set_match(question.expected_items, generated)
    elif t == 'T4':
        scores = []
        if question.expected_answer is not None:
            scores.append(score_word_overlap(question.expected_answer,
                                             generated))
        if question.expected_items is not None:
            scores.append(score_set_match(question.expected_items,
                                          generated))
        if not scores:
            raise ScorerError(f'{question.id}: no T4 expectation')
        return sum(scores) / len(scores)
    elif t == 'T5':
        assert question.expected_label is not None
        return score_binary(question.expected_label, generated)
    elif t == 'T6':
        assert question.expected_mappings is not None
        return score_mapping(question.expected_mappings, generated)
    raise ScorerError(f'invalid task type: {t!r}')


def parse_judge(text: str) -> JudgeScores:
    """Parse "accuracy: N" style judge output.  Raises JudgeParseError."""
    values = []
    for dim in JUDGE_DIMENSIONS:
        m = JUDGE_RES[dim].search(text)
        if m is None:
            raise JudgeParseError(f'no {dim} score found')
        value = int(m.group(1))
        if not 1 <= value <= 5:
            raise JudgeParseError(f'{dim} score {value} out of range 1-5')
        values.append(value)
    return JudgeScores(*values)


def judge(question: EvalQuestion,
          response: str,
          provider: ChatProvider,
          prompts: PromptLibrary
          ) -> typing.Optional[JudgeScores]:
    """
    Score `response` with an LLM judge

    Unparseable output triggers one reprompt.  If that fails too,
    or the provider fails, None is returned and the failure logged.
    """

    if not question.policy_excerpt or not question.reference_answer:
        raise ScorerError(f'{question.id}: judging requires a policy '
                          f'excerpt and a reference answer')
    messages = [ChatMessage('user', prompts.render(
        'judge',
        policy_excerpt=question.policy_excerpt,
        reference=question.reference_answer,
        question=question.question,
        response=response))]

    for attempt in range(2):
        try:
            resp = provider.complete(ChatRequest(
                messages=list(messages),
                temperature=JUDGE_TEMPERATURE,
                model_id=provider.model_id))
        except ProviderError as e:
            log.warning(f'{question.id}: judge call failed: {e}')
            return None
        text = resp.text or ''
        try:
            return parse_judge(text)
        except JudgeParseError as e:
            log.warning(f'{question.id}: unparseable judge output: {e}')
            messages += [ChatMessage('assistant', text),
                         ChatMessage('user',
                                     JUDGE_REPROMPT.format(error=e))]
    return None


def condition_kind(condition: str) -> Condition:
    return Condition.NC if condition == 'NC' else Condition.KG


def run_eval(questions: typing.Sequence[EvalQuestion],
             conditions: typing.Sequence[str],
             runs: int,
             pipelines: typing.Mapping[str, Pipeline],
             judge_provider: typing.Optional[ChatProvider] = None,
             prompts: typing.Optional[PromptLibrary] = None
             ) -> typing.List[ScoreRecord]:
    """
    Answer and score every question under every condition, `runs` times

    Records are produced in run, condition, question order.  Failures
    of a single question are recorded (heuristic 0, error set)
    and never abort the sweep.  Judging is skipped when
    `judge_provider` is None.
    """

    if runs < 1:
        raise ValueError(f'runs must be at least 1: {runs}')
    records = []
    for run in range(runs):
        for cond in conditions:
            pipeline = pipelines[cond]
            for q in questions:
                try:
                    ans = run_condition(q.question, condition_kind(cond),
                                        pipeline, task_type=q.task_type)
                except Exception as e:
                    log.error(f'{q.id} [{cond}, run {run}]: '
                              f'{type(e).__name__}: {e}')
                    records.append(ScoreRecord(
                        q.id, cond, run, 0.0, task_type=q.task_type,
                        error=f'{type(e).__name__}: {e}'))
                    continue

                errors = []
                try:
                    heuristic = score_heuristic(q, ans.answer)
                except ScorerError as e:
                    log.error(f'{q.id} [{cond}, run {run}]: scoring '
                              f'failed: {e}')
                    errors.append(f'ScorerError: {e}')
                    heuristic = 0.0
                scores = None
                if judge_provider is not None:
                    try:
                        scores = judge(q, ans.answer, judge_provider,
                                       prompts or pipeline.prompts)
                    except ScorerError as e:
                        log.error(f'{q.id} [{cond}, run {run}]: {e}')
                        errors.append(f'ScorerError: {e}')
                    else:
                        if scores is None:
                            errors.append('judge failed')
                records.append(ScoreRecord(
                    question_id=q.id,
                    condition=cond,
                    run_index=run,
                    heuristic=heuristic,
                    judge=scores,
                    task_type=q.task_type,
                    path=ans.diagnostics.path,
                    evidence_count=ans.diagnostics.evidence_count,
                    evidence_sources=ans.diagnostics.evidence_sources,
                    answer=ans.answer,
                    error='; '.join(errors)))
                log.info(f'{q.id} [{cond}, run {run}]: '
                         f'H={records[-1].heuristic:.2f}')
    return records


def mean_std(values: typing.Sequence[float]
             ) -> typing.Tuple[float, float]:
    """Mean and sample (n-1) standard deviation, 0 for one value"""
    arr = numpy.asarray(values, dtype=float)
    std = float(numpy.std(arr, ddof=1)) if len(arr) > 1 else 0.0
    return float(numpy.mean(arr)), std


def _cell(records: typing.Sequence[ScoreRecord]) -> Cell:
    runs = sorted(set(r.run_index for r in records))
    h_means = [float(numpy.mean([r.heuristic for r in records
                                 if r.run_index == run]))
               for run in runs]
    j_means = []
    for run in runs:
        composites = [r.judge.composite for r in records
                      if r.run_index == run and r.judge is not None]
        if composites:
            j_means.append(float(numpy.mean(composites)))
    h_mean, h_std = mean_std(h_means)
    if j_means:
        j_mean, j_std = mean_std(j_means)
        return Cell(h_mean, h_std, j_mean, j_std)
    return Cell(h_mean, h_std, None, None)


def aggregate(records: typing.Sequence[ScoreRecord]) -> EvalTable:
    """
    Aggregate records per (condition, task type) and per condition

    Every cell holds the mean and sample standard deviation
    of per-run means.
    """

    conditions = list(dict.fromkeys(r.condition for r in records))
    cells: typing.Dict[str, typing.Dict[str, Cell]] = {}
    overall = {}
    for cond in conditions:
        subset = [r for r in records if r.condition == cond]
        cells[cond] = {}
        for t in TASK_TYPES:
            task_records = [r for r in subset if r.task_type == t]
            if task_records:
                cells[cond][t] = _cell(task_records)
        overall[cond] = _cell(subset)
    return EvalTable(cells, overall)


def format_table(table: EvalTable) -> typing.Iterator[str]:
    """Yield lines of the condition x task type result table"""
    header = f'{"condition":<10}'
    for t in TASK_TYPES:
        header += f'{t + " H":>7}{t + " J":>7}'
    header += f'{"Overall H":>13}{"Overall J":>12}'
    yield header
    for cond, row in table.cells.items():
        line = f'{cond:<10}'
        for t in TASK_TYPES:
            cell = row.get(t)
            if cell is None:
                line += f'{"-":>7}{"-":>7}'
                continue
            line += f'{cell.h_mean:>7.2f}'
            line += (f'{cell.j_mean:>7.1f}' if cell.j_mean is not None
                     else ' ' * 7)
        total = table.overall[cond]
        line += f'{f"{total.h_mean:.2f}±{total.h_std:.2f}":>13}'
        if total.j_mean is not None:
            assert total.j_std is not None
            line += f'{f"{total.j_mean:.1f}±{total.j_std:.1f}":>12}'
        yield line.rstrip()


def diagnostics_summary(records: typing.Sequence[ScoreRecord]
                        ) -> typing.Dict[str, typing.Dict[str, float]]:
    """
    Summarize retrieval behavior per condition: mean evidence count
    per path and the share of questions routed to the direct path.
    """

    ret = {}
    for cond in dict.fromkeys(r.condition for r in records):
        subset = [r for r in records
                  if r.condition == cond and r.path in ('direct', 'agent')]
        if not subset:
            continue
        summary = {
            'direct_share': sum(1 for r in subset if r.path == 'direct')
            / len(subset),
        }
        for path in ('direct', 'agent'):
            counts = [r.evidence_count for r in subset if r.path == path]
            if counts:
                summary[f'{path}_evidence_mean'] = float(numpy.mean(counts))
        ret[cond] = summary
    return ret
