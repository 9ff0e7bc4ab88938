# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Answer synthesis and the per-condition answer pipeline. """

import enum
import json
import logging
import typing

from pathlib import Path

from policykg.graphstore import GraphStore
from policykg.llm import (ChatMessage, ChatProvider, ChatRequest, Embedder,
                          ProviderProtocolError, UndefinedSimilarity, cosine)
from policykg.model import DATA_DIR, Chunk, KnowledgeGraph
from policykg.prompts import PromptLibrary
from policykg.retrieval import (AgentConfig, EvidenceBundle, RouteDecision,
                                RouteMode, retrieve)


DEFAULT_ICL_POOL = DATA_DIR / 'icl_pool.json'
TASK_TYPES = ('T1', 'T2', 'T3', 'T4', 'T5', 'T6')

log = logging.getLogger('policykg')


class Condition(enum.Enum):
    NC = 'nc'
    KG = 'kg'


class ICLExample(typing.NamedTuple):
    id: str
    task_type: str
    question: str
    answer: str
    embedding: typing.Optional[typing.List[float]] = None


class SynthesisInput(typing.NamedTuple):
    serialized_evidence: typing.Optional[str]
    chunk_texts: typing.List[typing.Tuple[str, str]]
    icl_examples: typing.List[ICLExample]
    question: str
    task_instructions: str


class Diagnostics(typing.NamedTuple):
    path: str
    decided_by: str
    evidence_count: int
    evidence_sources: int
    tool_steps: int


class AnswerRecord(typing.NamedTuple):
    question: str
    condition: Condition
    answer: str
    route: typing.Optional[RouteDecision]
    bundle: typing.Optional[EvidenceBundle]
    diagnostics: Diagnostics

    def to_json(self) -> typing.Dict[str, typing.Any]:
        """Answer with its route, evidence ids and tool trace"""
        route: typing.Optional[typing.Dict[str, str]] = None
        if self.route is not None:
            route = {'path': self.route.path.value,
                     'decided_by': self.route.decided_by.value,
                     'rationale': self.route.rationale}
        evidence: typing.Optional[typing.Dict[str, typing.List[str]]] = None
        trace: typing.List[typing.Dict[str, typing.Any]] = []
        if self.bundle is not None:
            evidence = {'entity_ids': self.bundle.entity_ids,
                        'relation_ids': self.bundle.relation_ids,
                        'chunk_ids': self.bundle.chunk_ids}
            trace = [step._asdict() for step in self.bundle.trace]
        return {
            'question': self.question,
            'condition': self.condition.value,
            'answer': self.answer,
            'route': route,
            'evidence': evidence,
            'trace': trace,
            'diagnostics': self.diagnostics._asdict(),
        }


def load_icl_pool(path: typing.Optional[Path] = None
                  ) -> typing.List[ICLExample]:
    """Load the ICL example pool (a JSON array of examples)"""
    with open(path or DEFAULT_ICL_POOL, 'r') as f:
        pool = [ICLExample(**x) for x in json.load(f)]
    missing = set(TASK_TYPES) - set(x.task_type for x in pool)
    if missing:
        log.warning(f'ICL pool does not cover task types: '
                    f'{", ".join(sorted(missing))}')
    return pool


def select_icl(question: str,
               pool: typing.Sequence[ICLExample],
               embedder: Embedder,
               n: int = 2
               ) -> typing.List[ICLExample]:
    """
    Pick the `n` pool examples most similar to `question`

    Pool questions without a stored embedding are embedded on the fly.
    Ties (and undefined similarities, scored as 0) keep pool order.
    """

    if not pool:
        raise ValueError('empty ICL pool')
    qv = embedder.embed([question])[0]
    todo = [x.question for x in pool if x.embedding is None]
    fresh = iter(embedder.embed(todo) if todo else [])
    scores = []
    for x in pool:
        v = next(fresh) if x.embedding is None else x.embedding
        try:
            scores.append(cosine(qv, v))
        except UndefinedSimilarity:
            scores.append(0.0)
    order = sorted(range(len(pool)), key=lambda i: (-scores[i], i))
    return [pool[i] for i in order[:n]]


def flat(text: str) -> str:
    return ' '.join(text.split())


def serialize_evidence(graph: KnowledgeGraph,
                       bundle: EvidenceBundle
                       ) -> str:
    """
    Render evidence relations-first

    Relations are grouped by type (alphabetically) and listed
    as "Source -> Target" lines ordered by source name.  Entity
    blocks follow in bundle order.  Newlines inside values are
    collapsed to single spaces.
    """

    evidence = set(bundle.entity_ids)
    rels = [graph.relations[r] for r in bundle.relation_ids
            if graph.relations[r].source_entity_id in evidence
            and graph.relations[r].target_entity_id in evidence]

    def names(rel_id: str) -> typing.Tuple[str, str, str]:
        rel = graph.relations[rel_id]
        return (flat(graph.entities[rel.source_entity_id].name),
                flat(graph.entities[rel.target_entity_id].name),
                rel_id)

    lines = ['RELATIONS']
    for rel_type in sorted(set(r.relation_type for r in rels)):
        lines.append(f'[{rel_type}]')
        for src, dst, _ in sorted(names(r.id) for r in rels
                                  if r.relation_type == rel_type):
            lines.append(f'{src} -> {dst}')
    lines.append('ENTITIES')
    for eid in bundle.entity_ids:
        e = graph.entities[eid]
        lines.append(f'[{e.id}] {flat(e.name)}')
        for label, value in (('type', e.entity_type),
                             ('article', e.article_ref),
                             ('description', e.description),
                             ('quote', e.policy_quote)):
            value = flat(value)
            lines.append(f'  {label}: {value}' if value
                         else f'  {label}:')
    return '\n'.join(lines) + '\n'


def synthesize(inp: SynthesisInput,
               provider: ChatProvider,
               prompts: PromptLibrary,
               temperature: float = 0.0
               ) -> str:
    """
    Issue the single answer-generation call

    Prompt sections are ordered: ICL examples, evidence, chunks,
    task instructions, question.  Without serialized evidence
    (the no-context condition) neither evidence nor chunk sections
    are emitted.
    """

    prompt = prompts.render('synthesize',
                            examples=inp.icl_examples,
                            evidence=inp.serialized_evidence,
                            chunks=inp.chunk_texts,
                            instructions=inp.task_instructions,
                            question=inp.question)
    resp = provider.complete(ChatRequest(
        messages=[ChatMessage('user', prompt)],
        temperature=temperature,
        model_id=provider.model_id))
    if resp.text is None:
        raise ProviderProtocolError('synthesis reply is not text',
                                    raw=resp.raw)
    return resp.text


class Pipeline(object):
    """Everything needed to answer questions under one condition"""

    def __init__(self,
                 provider: ChatProvider,
                 embedder: Embedder,
                 prompts: PromptLibrary,
                 icl_pool: typing.Sequence[ICLExample],
                 store: typing.Optional[GraphStore] = None,
                 chunks: typing.Mapping[str, Chunk] = {},
                 agent_config: AgentConfig = AgentConfig(),
                 route_mode: RouteMode = RouteMode.ADAPTIVE,
                 temperature: float = 0.0
                 ) -> None:
        self.provider = provider
        self.embedder = embedder
        self.prompts = prompts
        self.icl_pool = list(icl_pool)
        self.store = store
        self.chunks = chunks
        self.agent_config = agent_config
        self.route_mode = route_mode
        self.temperature = temperature


def run_condition(question: str,
                  condition: Condition,
                  pipeline: Pipeline,
                  task_type: typing.Optional[str] = None
                  ) -> AnswerRecord:
    """
    Answer `question` under `condition`

    NC synthesizes from the question and ICL examples alone.  KG routes,
    retrieves, serializes the evidence, injects the source chunks
    and then synthesizes.
    """

    examples = select_icl(question, pipeline.icl_pool, pipeline.embedder)
    instructions = pipeline.prompts.task_instructions(task_type)

    decision = None
    bundle = None
    if condition == Condition.NC:
        inp = SynthesisInput(None, [], examples, question, instructions)
        diagnostics = Diagnostics('none', 'none', 0, 0, 0)
    else:
        store = pipeline.store
        if store is None:
            raise ValueError('KG condition requires a graph')
        decision, bundle = retrieve(question, store, pipeline.provider,
                                    pipeline.prompts,
                                    config=pipeline.agent_config,
                                    route_mode=pipeline.route_mode,
                                    task_type=task_type)
        chunk_texts = []
        for cid in bundle.chunk_ids:
            chunk = pipeline.chunks.get(cid)
            if chunk is None:
                log.warning(f'Chunk {cid} missing from the chunk store')
                continue
            chunk_texts.append((cid, chunk.text))
        inp = SynthesisInput(serialize_evidence(store.graph, bundle),
                             chunk_texts, examples, question, instructions)
        diagnostics = Diagnostics(
            path=decision.path.value,
            decided_by=decision.decided_by.value,
            evidence_count=len(bundle.entity_ids),
            evidence_sources=len(set(
                store.graph.entities[x].source_id
                for x in bundle.entity_ids)),
            tool_steps=len(bundle.trace))

    answer = synthesize(inp, pipeline.provider, pipeline.prompts,
                        temperature=pipeline.temperature)
    return AnswerRecord(question, condition, answer, decision, bundle,
                        diagnostics)
