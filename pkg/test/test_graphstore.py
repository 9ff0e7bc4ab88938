# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Tests for graph store queries. """

import collections
import random
import typing
import unittest

import numpy

from policykg.graphstore import (EmbeddingsMissing, EmptyQuery,
                                 EntityNotFound, GraphStore, MatchKind,
                                 schema_summary)
from policykg.llm import HashingEmbedder, cosine, embed_graph
from policykg.model import (Entity, KnowledgeGraph, OntologySchema,
                            Relation)


def toy_graph() -> KnowledgeGraph:
    graph = KnowledgeGraph(OntologySchema.closed())
    for e in (Entity('eu_e0001', 'High-risk AI system', 'AI_SYSTEM',
                     'AI system listed in Annex III', source_id='eu'),
              Entity('eu_e0002', 'Data poisoning', 'RISK',
                     'manipulation of training data', source_id='eu'),
              Entity('eu_e0003', 'Human oversight', 'RISK_CONTROL',
                     'natural persons oversee the system', source_id='eu'),
              Entity('eu_e0004', 'Record-keeping', 'RISK_CONTROL',
                     'automatic logs over the lifetime', source_id='eu'),
              Entity('owasp_e0001', 'Data and model poisoning', 'RISK',
                     'pre-training data manipulated', source_id='owasp')):
        graph.add_entity(e)
    for rel in (Relation('r00001', 'HAS_RISK', 'eu_e0001', 'eu_e0002'),
                Relation('r00002', 'MITIGATES', 'eu_e0003', 'eu_e0002'),
                Relation('r00003', 'CORRESPONDS_TO', 'eu_e0002',
                         'owasp_e0001', similarity=0.9)):
        assert graph.add_relation(rel) is None
    return graph


def random_graph(rng: random.Random,
                 nodes: int,
                 edges: int
                 ) -> KnowledgeGraph:
    graph = KnowledgeGraph(OntologySchema.open())
    ids = [f's{i % 3}_e{i + 1:04d}' for i in range(nodes)]
    for i, eid in enumerate(ids):
        graph.add_entity(Entity(eid, f'entity {i}', 'thing',
                                source_id=f's{i % 3}'))
    for _ in range(edges):
        u, v = rng.sample(ids, 2)
        assert graph.add_relation(Relation(graph.next_relation_id(),
                                           'related', u, v)) is None
    return graph


def neighbors(graph: KnowledgeGraph,
              entity_id: str
              ) -> typing.Dict[str, typing.List[str]]:
    """Map each undirected neighbor to the relations joining it"""
    ret: typing.Dict[str, typing.List[str]] = {}
    for rid in graph.incident_relations(entity_id):
        rel = graph.relations[rid]
        other = (rel.target_entity_id if rel.source_entity_id == entity_id
                 else rel.source_entity_id)
        ret.setdefault(other, []).append(rid)
    return ret


def bfs_order(graph: KnowledgeGraph,
              start: str,
              depth: int
              ) -> typing.List[str]:
    seen = {start}
    order = [start]
    queue = collections.deque([(start, 0)])
    while queue:
        node, d = queue.popleft()
        if d == depth:
            continue
        for other in sorted(neighbors(graph, node)):
            if other not in seen:
                seen.add(other)
                order.append(other)
                queue.append((other, d + 1))
    return order


def brute_force_path(graph: KnowledgeGraph,
                     src: str,
                     dst: str,
                     max_len: int
                     ) -> typing.Optional[typing.List[str]]:
    """Enumerate simple paths and return the shortest, smallest one"""
    best: typing.Optional[typing.List[str]] = None

    def walk(path: typing.List[str]) -> None:
        nonlocal best
        if path[-1] == dst:
            if best is None or (len(path), path) < (len(best), best):
                best = list(path)
            return
        if len(path) > max_len:
            return
        for other in neighbors(graph, path[-1]):
            if other not in path:
                path.append(other)
                walk(path)
                path.pop()

    walk([src])
    return best


class KeywordSearchTests(unittest.TestCase):
    def setUp(self):
        self.store = GraphStore(toy_graph())

    def test_scores(self):
        hits = self.store.keyword_search('data poisoning training')
        self.assertEqual([(h.entity_id, h.score) for h in hits],
                         [('eu_e0002', 5.0), ('owasp_e0001', 5.0)])
        self.assertEqual(hits[0].match_kind, MatchKind.KEYWORD)

    def test_description_only(self):
        hits = self.store.keyword_search('logs')
        self.assertEqual([(h.entity_id, h.score) for h in hits],
                         [('eu_e0004', 1.0)])

    def test_duplicate_tokens_count_once(self):
        hits = self.store.keyword_search('oversight Oversight OVERSIGHT')
        self.assertEqual([(h.entity_id, h.score) for h in hits],
                         [('eu_e0003', 2.0)])

    def test_limit(self):
        self.assertEqual(len(self.store.keyword_search('data', k=1)), 1)
        with self.assertRaises(ValueError):
            self.store.keyword_search('data', k=0)

    def test_no_hits(self):
        self.assertEqual(self.store.keyword_search('quantum'), [])

    def test_empty_query(self):
        with self.assertRaises(EmptyQuery):
            self.store.keyword_search('?!')


class SemanticSearchTests(unittest.TestCase):
    def test_missing_embeddings(self):
        store = GraphStore(toy_graph(), HashingEmbedder())
        with self.assertRaises(EmbeddingsMissing):
            store.semantic_search('poisoning')
        with self.assertRaises(EmbeddingsMissing):
            GraphStore(toy_graph()).semantic_search('poisoning')

    def test_empty_query(self):
        store = GraphStore(toy_graph(), HashingEmbedder())
        with self.assertRaises(EmptyQuery):
            store.semantic_search('   ')

    def test_brute_force_ranking(self):
        rng = random.Random(99)
        embedder = HashingEmbedder()
        words = ['risk', 'data', 'poisoning', 'oversight', 'logs',
                 'human', 'model', 'transparency', 'bias', 'control',
                 'provider', 'deployer', 'audit', 'incident']
        for _ in range(100):
            size = rng.randint(2, 200)
            graph = random_graph(rng, size, rng.randint(0, size))
            for eid, e in list(graph.entities.items()):
                graph.update_entity(e._replace(
                    name=' '.join(rng.sample(words, rng.randint(1, 4)))))
            embed_graph(graph, embedder, text_mode='name')
            store = GraphStore(graph, embedder)
            query = ' '.join(rng.sample(words, rng.randint(1, 3)))
            k = rng.randint(1, 20)
            hits = store.semantic_search(query, k=k)

            qv = embedder.embed([query])[0]
            expected = []
            for e in graph.entities.values():
                assert e.embedding is not None
                expected.append((-cosine(qv, e.embedding), e.id))
            expected.sort()
            self.assertEqual([(h.entity_id, h.score) for h in hits],
                             [(eid, -neg) for neg, eid in expected[:k]])
            self.assertTrue(all(h.match_kind == MatchKind.SEMANTIC
                                for h in hits))
            # scores agree with a direct computation
            for h in hits:
                v = numpy.asarray(graph.entities[h.entity_id].embedding)
                self.assertAlmostEqual(
                    h.score, float(numpy.dot(qv, v)
                                   / (numpy.linalg.norm(qv)
                                      * numpy.linalg.norm(v))))


class ExpandNeighborsTests(unittest.TestCase):
    def test_toy(self):
        store = GraphStore(toy_graph())
        sub = store.expand_neighbors('eu_e0002')
        self.assertEqual(sub.entity_ids, ['eu_e0002', 'eu_e0001',
                                          'eu_e0003', 'owasp_e0001'])
        self.assertEqual(sub.relation_ids, ['r00001', 'r00002', 'r00003'])

    def test_isolated(self):
        store = GraphStore(toy_graph())
        sub = store.expand_neighbors('eu_e0004', depth=3)
        self.assertEqual(sub.entity_ids, ['eu_e0004'])
        self.assertEqual(sub.relation_ids, [])

    def test_errors(self):
        store = GraphStore(toy_graph())
        with self.assertRaises(EntityNotFound):
            store.expand_neighbors('eu_e0099')
        with self.assertRaises(ValueError):
            store.expand_neighbors('eu_e0001', depth=0)

    def test_bfs_oracle(self):
        rng = random.Random(7)
        for _ in range(20):
            graph = random_graph(rng, 25, rng.randint(10, 40))
            store = GraphStore(graph)
            start = rng.choice(sorted(graph.entities))
            depth = rng.randint(1, 3)
            sub = store.expand_neighbors(start, depth)
            order = bfs_order(graph, start, depth)
            self.assertEqual(sub.entity_ids, order)
            inside = set(order)
            self.assertEqual(sub.relation_ids, sorted(
                rid for rid, rel in graph.relations.items()
                if rel.source_entity_id in inside
                and rel.target_entity_id in inside))


class FindPathTests(unittest.TestCase):
    def test_toy(self):
        store = GraphStore(toy_graph())
        path = store.find_path('eu_e0001', 'owasp_e0001')
        assert path is not None
        self.assertEqual(path.entity_ids,
                         ['eu_e0001', 'eu_e0002', 'owasp_e0001'])
        self.assertEqual(path.relation_ids, ['r00001', 'r00003'])

    def test_same_entity(self):
        store = GraphStore(toy_graph())
        path = store.find_path('eu_e0003', 'eu_e0003')
        assert path is not None
        self.assertEqual(path.entity_ids, ['eu_e0003'])

    def test_too_long(self):
        store = GraphStore(toy_graph())
        self.assertIsNone(store.find_path('eu_e0001', 'owasp_e0001',
                                          max_len=1))
        self.assertIsNone(store.find_path('eu_e0001', 'eu_e0004'))

    def test_unknown(self):
        store = GraphStore(toy_graph())
        with self.assertRaises(EntityNotFound):
            store.find_path('eu_e0001', 'nist_e0001')

    def test_path_oracle(self):
        rng = random.Random(11)
        for _ in range(100):
            graph = random_graph(rng, 12, rng.randint(8, 20))
            store = GraphStore(graph)
            src, dst = rng.sample(sorted(graph.entities), 2)
            max_len = rng.randint(1, 4)
            path = store.find_path(src, dst, max_len)
            expected = brute_force_path(graph, src, dst, max_len)
            if expected is None:
                self.assertIsNone(path)
                continue
            assert path is not None
            self.assertEqual(path.entity_ids, expected)
            for (u, v), rid in zip(zip(path.entity_ids,
                                       path.entity_ids[1:]),
                                   path.relation_ids):
                self.assertEqual(rid, min(neighbors(graph, u)[v]))


class SchemaSummaryTests(unittest.TestCase):
    def test_closed(self):
        summary = schema_summary(toy_graph())
        lines = summary.splitlines()
        self.assertEqual(lines[:4], ['schema: closed',
                                     'sources: eu, owasp',
                                     'entities: 5',
                                     'relations: 3'])
        self.assertIn('  RISK: 2', lines)
        self.assertIn('  STAKEHOLDER: 0', lines)
        self.assertIn('  CORRESPONDS_TO: 1', lines)
        self.assertTrue(summary.endswith('\n'))

    def test_empty_open(self):
        summary = schema_summary(KnowledgeGraph(OntologySchema.open()))
        self.assertIn('sources: (none)', summary)
