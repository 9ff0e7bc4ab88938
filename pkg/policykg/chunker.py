# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Document segmentation: sliding-window scan and review. """

import logging
import re
import typing

from policykg.llm import (ChatMessage, ChatProvider, ChatRequest,
                          parse_fenced_json)
from policykg.model import Chunk, PolicySource
from policykg.prompts import PromptLibrary


SNAP_RADIUS = 200
PARAGRAPH_TARGET = 3500
FORCED_SPLIT_REASON = 'forced split at midpoint'

PARAGRAPH_BREAK_RE = re.compile(r'\n(?:[ \t]*\n)+')
SENTENCE_BREAK_RE = re.compile(r'[.?!]\s+')

log = logging.getLogger('policykg')


class ChunkerConfigError(ValueError):
    pass


class ChunkerConfig(typing.NamedTuple):
    window_chars: int = 6000
    overlap_chars: int = 400
    max_chunk_chars: int = 4000

    def check(self) -> None:
        if not 0 < self.overlap_chars < self.window_chars:
            raise ChunkerConfigError(
                f'overlap ({self.overlap_chars}) must be positive and '
                f'smaller than window ({self.window_chars})')
        if not 0 < self.max_chunk_chars <= self.window_chars:
            raise ChunkerConfigError(
                f'max chunk size ({self.max_chunk_chars}) must be positive '
                f'and not larger than window ({self.window_chars})')


class BoundaryProposal(typing.NamedTuple):
    offset: int
    justification: str = ''


class BoundaryProposer(object):
    """Base class for split point proposers"""

    def propose(self,
                window_text: str,
                window_start: int,
                window_end: int,
                last_boundary: int
                ) -> typing.List[BoundaryProposal]:
        """
        Propose split points within a scan window.  Offsets are
        absolute document positions.
        """
        raise NotImplementedError()

    def propose_splits(self,
                       segment_text: str,
                       segment_start: int,
                       segment_end: int,
                       max_chunk_chars: int
                       ) -> typing.List[BoundaryProposal]:
        """Propose extra split points within an oversized segment"""
        raise NotImplementedError()


def paragraph_breaks(text: str, base: int = 0) -> typing.List[int]:
    """Absolute offsets immediately following blank lines in `text`"""
    return [base + m.end() for m in PARAGRAPH_BREAK_RE.finditer(text)]


def nearest(candidates: typing.Iterable[int],
            target: int
            ) -> typing.Optional[int]:
    """Return the candidate nearest to `target`, earlier one on ties"""
    return min(candidates, key=lambda c: (abs(c - target), c),
               default=None)


class ParagraphProposer(BoundaryProposer):
    """
    Offline proposer splitting at the blank line closest to every
    multiple of `target` characters.
    """

    def __init__(self, target: int = PARAGRAPH_TARGET) -> None:
        self.target = target

    def propose(self,
                window_text: str,
                window_start: int,
                window_end: int,
                last_boundary: int
                ) -> typing.List[BoundaryProposal]:
        breaks = [b for b in paragraph_breaks(window_text, window_start)
                  if b < window_end]
        ret = []
        m = (window_start // self.target + 1) * self.target
        while m < window_end:
            if m - last_boundary >= self.target // 2:
                best = nearest(breaks, m)
                if best is not None:
                    ret.append(BoundaryProposal(
                        best, f'paragraph break nearest to offset {m}'))
            m += self.target
        return ret

    def propose_splits(self,
                       segment_text: str,
                       segment_start: int,
                       segment_end: int,
                       max_chunk_chars: int
                       ) -> typing.List[BoundaryProposal]:
        length = segment_end - segment_start
        parts = -(-length // min(self.target, max_chunk_chars))
        breaks = [b for b in paragraph_breaks(segment_text, segment_start)
                  if b < segment_end]
        ret = []
        for i in range(1, parts):
            m = segment_start + i * length // parts
            best = nearest(breaks, m)
            if best is not None:
                ret.append(BoundaryProposal(
                    best, f'paragraph break nearest to offset {m}'))
        return ret


def parse_boundaries(text: str) -> typing.List[BoundaryProposal]:
    """Parse a {"boundaries": [...]} reply.  Raises ValueError."""
    data = parse_fenced_json(text)
    try:
        return [BoundaryProposal(int(b['offset']),
                                 str(b.get('justification', '')))
                for b in data['boundaries']]
    except (KeyError, TypeError, AttributeError) as e:
        raise ValueError(f'malformed boundary list: {e!r}')


class LLMProposer(BoundaryProposer):
    """Proposer asking a chat model for split points"""

    def __init__(self,
                 provider: ChatProvider,
                 prompts: PromptLibrary,
                 max_chunk_chars: int = 4000
                 ) -> None:
        self.provider = provider
        self.prompts = prompts
        self.max_chunk_chars = max_chunk_chars

    def _ask(self, prompt: str) -> typing.List[BoundaryProposal]:
        resp = self.provider.complete(ChatRequest(
            messages=[ChatMessage('user', prompt)],
            model_id=self.provider.model_id))
        try:
            return parse_boundaries(resp.text or '')
        except ValueError as e:
            log.warning(f'Unparseable boundary proposal: {e}')
            return []

    def propose(self,
                window_text: str,
                window_start: int,
                window_end: int,
                last_boundary: int
                ) -> typing.List[BoundaryProposal]:
        return self._ask(self.prompts.render(
            'chunk_scan',
            window_text=window_text,
            window_start=window_start,
            window_end=window_end,
            last_boundary=last_boundary,
            max_chunk_chars=self.max_chunk_chars))

    def propose_splits(self,
                       segment_text: str,
                       segment_start: int,
                       segment_end: int,
                       max_chunk_chars: int
                       ) -> typing.List[BoundaryProposal]:
        return self._ask(self.prompts.render(
            'chunk_review',
            segment_text=segment_text,
            segment_start=segment_start,
            segment_end=segment_end,
            max_chunk_chars=max_chunk_chars))


def snap_boundary(document: str,
                  offset: int,
                  radius: int = SNAP_RADIUS
                  ) -> int:
    """
    Snap `offset` to the nearest break

    Paragraph breaks (blank lines) within `radius` characters win;
    otherwise sentence breaks are used.  The returned index is
    the position immediately following the break.  Ties go to
    the earlier position.  If no break is in range, `offset` is
    returned unchanged.
    """

    n = len(document)
    pos = max(0, offset - 2 * radius)
    endpos = min(n, offset + 2 * radius)
    for regex in (PARAGRAPH_BREAK_RE, SENTENCE_BREAK_RE):
        best = nearest((m.end() for m in regex.finditer(document, pos,
                                                         endpos)
                        if 0 < m.end() < n
                        and abs(m.end() - offset) <= radius),
                       offset)
        if best is not None:
            return best
    return offset


def scan(document: str,
         config: ChunkerConfig,
         proposer: BoundaryProposer,
         discarded: typing.Optional[typing.List[BoundaryProposal]] = None
         ) -> typing.List[BoundaryProposal]:
    """
    Scan `document` with a sliding window collecting split points

    The window advances by window_chars - overlap_chars.  Proposals
    outside their window (or outside the document) are discarded
    with a warning, and appended to `discarded` if it is passed.
    Accepted proposals are snapped to the nearest break and returned
    sorted by offset, without duplicates.
    """

    if not document:
        raise ValueError('cannot scan an empty document')
    config.check()
    n = len(document)
    step = config.window_chars - config.overlap_chars

    accepted: typing.Dict[int, BoundaryProposal] = {}
    last_boundary = 0
    start = 0
    while True:
        end = min(start + config.window_chars, n)
        proposals = proposer.propose(document[start:end], start, end,
                                     last_boundary)
        log.debug(f'Window {start}-{end}: {len(proposals)} proposals')
        for p in proposals:
            if not (start <= p.offset <= end and 0 < p.offset < n):
                log.warning(f'Discarding proposal at {p.offset} outside '
                            f'window {start}-{end}')
                if discarded is not None:
                    discarded.append(p)
                continue
            snapped = snap_boundary(document, p.offset)
            if snapped not in accepted:
                accepted[snapped] = BoundaryProposal(snapped,
                                                     p.justification)
                last_boundary = max(last_boundary, snapped)
        if end >= n:
            break
        start += step

    return [accepted[k] for k in sorted(accepted)]


def review(document: str,
           boundaries: typing.Sequence[typing.Union[int, BoundaryProposal]],
           config: ChunkerConfig,
           proposer: BoundaryProposer,
           source_id: str = 'doc'
           ) -> typing.List[Chunk]:
    """
    Assemble chunks between `boundaries` and enforce the size cap

    Every segment longer than max_chunk_chars gets one round
    of additional proposals; anything still oversized is split
    at the snapped midpoint until all chunks fit.
    """

    config.check()
    n = len(document)
    cuts = [p if isinstance(p, BoundaryProposal) else BoundaryProposal(p)
            for p in boundaries]
    prev = 0
    for p in cuts:
        if not prev < p.offset < n:
            raise ValueError(f'boundary {p.offset} not sorted or not '
                             f'strictly inside the document')
        prev = p.offset

    starts = [0] + [p.offset for p in cuts]
    ends = [(p.offset, p.justification) for p in cuts] + [(n, '')]
    segments = []
    for start, (end, reason) in zip(starts, ends):
        if end - start <= config.max_chunk_chars:
            segments.append((start, end, reason))
            continue
        log.info(f'Segment {start}-{end} exceeds {config.max_chunk_chars} '
                 f'characters, asking for more splits')
        extra: typing.Dict[int, str] = {}
        for p in proposer.propose_splits(document[start:end], start, end,
                                         config.max_chunk_chars):
            if not start < p.offset < end:
                log.warning(f'Discarding split proposal at {p.offset} '
                            f'outside segment {start}-{end}')
                continue
            snapped = snap_boundary(document, p.offset)
            if not start < snapped < end:
                snapped = p.offset
            extra.setdefault(snapped, p.justification)
        sub_starts = [start] + sorted(extra)
        sub_ends = [(k, extra[k]) for k in sorted(extra)] + [(end, reason)]
        for s, (e, r) in zip(sub_starts, sub_ends):
            segments.extend(force_split(document, s, e, r,
                                        config.max_chunk_chars))

    return [Chunk(id=f'{source_id}_c{i:03d}',
                  source_id=source_id,
                  start_offset=s,
                  end_offset=e,
                  text=document[s:e],
                  boundary_reason=r)
            for i, (s, e, r) in enumerate(segments, start=1)]


def force_split(document: str,
                start: int,
                end: int,
                reason: str,
                max_chunk_chars: int
                ) -> typing.List[typing.Tuple[int, int, str]]:
    """Split [start, end) at snapped midpoints until every piece fits"""
    ret = []
    stack = [(start, end, reason)]
    while stack:
        s, e, r = stack.pop()
        if e - s <= max_chunk_chars:
            ret.append((s, e, r))
            continue
        mid = s + (e - s) // 2
        cut = snap_boundary(document, mid)
        if not s < cut < e:
            cut = mid
        log.info(f'Forced split of {s}-{e} at {cut}')
        stack.append((cut, e, r))
        stack.append((s, cut, FORCED_SPLIT_REASON))
    return ret


def chunk_document(source: PolicySource,
                   config: ChunkerConfig,
                   proposer: BoundaryProposer
                   ) -> typing.List[Chunk]:
    """Chunk a policy source: scan followed by review"""
    if not source.id:
        raise ValueError('policy source without an id')
    if not source.document_text:
        raise ValueError(f'{source.id}: empty document')
    boundaries = scan(source.document_text, config, proposer)
    chunks = review(source.document_text, boundaries, config, proposer,
                    source_id=source.id)
    log.info(f'{source.id}: {len(chunks)} chunks')
    return chunks
