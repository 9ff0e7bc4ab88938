# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Cross-policy correspondence linking. """

import logging
import typing

import numpy

from Levenshtein import distance

from policykg.llm import Embedder, entity_embedding_text
from policykg.model import CORRESPONDS_TO, Entity, KnowledgeGraph, Relation


EMBED_TEXT_MODES = ('name_description', 'name')

log = logging.getLogger('policykg')


class LinkerConfig(typing.NamedTuple):
    cosine_threshold: float = 0.70
    string_threshold: float = 0.80
    max_links_per_entity: int = 3
    embed_text: str = 'name_description'

    def check(self) -> None:
        for name in ('cosine_threshold', 'string_threshold'):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ValueError(f'{name} must be in (0, 1]: {value}')
        if self.max_links_per_entity < 1:
            raise ValueError(f'max_links_per_entity must be at least 1: '
                             f'{self.max_links_per_entity}')
        if self.embed_text not in EMBED_TEXT_MODES:
            raise ValueError(f'embed_text must be one of '
                             f'{", ".join(EMBED_TEXT_MODES)}')


def collapse(text: str) -> str:
    return ' '.join(text.casefold().split())


def string_similarity(a: str, b: str) -> float:
    """
    Normalized Levenshtein similarity of case-folded,
    whitespace-collapsed `a` and `b`
    """

    a = collapse(a)
    b = collapse(b)
    if not a or not b:
        raise ValueError('string_similarity() of an empty string')
    return 1.0 - distance(a, b) / max(len(a), len(b))


def score_pairs(entities: typing.Sequence[Entity],
                config: LinkerConfig,
                embedder: typing.Optional[Embedder]
                ) -> typing.Dict[typing.Tuple[str, str], float]:
    """
    Score all cross-source entity pairs at or above the threshold

    With an embedder, pairs are scored by cosine similarity of entity
    embeddings (stored ones are reused, missing ones computed).
    Otherwise names are compared by string_similarity().  Returns
    a dict keyed by (smaller id, larger id).
    """

    ret: typing.Dict[typing.Tuple[str, str], float] = {}
    if embedder is not None:
        threshold = config.cosine_threshold
        missing = [e for e in entities if e.embedding is None]
        fresh = {}
        if missing:
            fresh = dict(zip((e.id for e in missing),
                             embedder.embed([entity_embedding_text(
                                 e, config.embed_text) for e in missing])))
        matrix = numpy.array([
            fresh[e.id] if e.embedding is None else e.embedding
            for e in entities], dtype=float)
        norms = numpy.linalg.norm(matrix, axis=1)
        valid = norms > 0
        matrix[valid] /= norms[valid, None]
        sims = numpy.clip(matrix @ matrix.T, -1.0, 1.0)
    else:
        threshold = config.string_threshold

    for i, a in enumerate(entities):
        for j in range(i + 1, len(entities)):
            b = entities[j]
            if a.source_id == b.source_id:
                continue
            if embedder is not None:
                if not (valid[i] and valid[j]):
                    continue
                score = float(sims[i, j])
            else:
                score = string_similarity(a.name, b.name)
            if score >= threshold:
                ret[min(a.id, b.id), max(a.id, b.id)] = score
    return ret


def link_cross_policy(graph: KnowledgeGraph,
                      config: LinkerConfig = LinkerConfig(),
                      embedder: typing.Optional[Embedder] = None
                      ) -> typing.List[Relation]:
    """
    Add CORRESPONDS_TO edges between entities of different sources

    Every entity ranks its candidates by descending score (ties by
    partner id) and keeps the top max_links_per_entity.  A pair is
    linked only if each endpoint is in the other's top list.  Pairs
    already linked are skipped, so re-running adds nothing.  Edges
    run from the entity whose source id is lexicographically smaller.
    Returns the new relations.
    """

    config.check()
    if len(graph.sources) < 2:
        log.info('Fewer than two sources, nothing to link')
        return []

    entities = sorted(graph.entities.values(), key=lambda e: e.id)
    scores = score_pairs(entities, config, embedder)

    prefs: typing.Dict[str, typing.List[typing.Tuple[float, str]]] = {}
    for (a, b), score in scores.items():
        prefs.setdefault(a, []).append((score, b))
        prefs.setdefault(b, []).append((score, a))
    top = {eid: set(other for _, other in sorted(
               lst, key=lambda x: (-x[0], x[1]))[
                   :config.max_links_per_entity])
           for eid, lst in prefs.items()}

    def linked(a: str, b: str) -> bool:
        return (graph.find_relation(CORRESPONDS_TO, a, b) is not None
                or graph.find_relation(CORRESPONDS_TO, b, a) is not None)

    def link_degree(eid: str) -> int:
        return sum(1 for rid in graph.incident_relations(eid)
                   if graph.relations[rid].relation_type == CORRESPONDS_TO)

    new = []
    for (a, b), score in sorted(scores.items()):
        if b not in top[a] or a not in top[b] or linked(a, b):
            continue
        if (link_degree(a) >= config.max_links_per_entity
                or link_degree(b) >= config.max_links_per_entity):
            continue
        ea = graph.entities[a]
        eb = graph.entities[b]
        src, dst = (ea, eb) if ea.source_id < eb.source_id else (eb, ea)
        rel = Relation(id=graph.next_relation_id(),
                       relation_type=CORRESPONDS_TO,
                       source_entity_id=src.id,
                       target_entity_id=dst.id,
                       description=f'{src.name} corresponds to {dst.name}',
                       similarity=min(1.0, score))
        violation = graph.add_relation(rel)
        assert violation is None, violation
        new.append(rel)

    log.info(f'Linked {len(new)} cross-policy correspondences '
             f'({len(scores)} candidate pairs)')
    return new
