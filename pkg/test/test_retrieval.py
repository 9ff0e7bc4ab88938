# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Tests for routing and both retrieval paths. """

import json
import typing
import unittest

import numpy

from policykg.graphstore import EntityNotFound, GraphStore
from policykg.llm import (Embedder, HashingEmbedder, ReplayProvider,
                          embed_graph)
from policykg.model import Entity, KnowledgeGraph, OntologySchema, Relation
from policykg.prompts import PromptLibrary
from policykg.retrieval import (AGENT_TOOLS, TERMINAL_TOOL, AgentConfig,
                                DecidedBy, RetrievalPath, RouteMode,
                                ToolArgumentError, agent_retrieve,
                                call_tool, direct_retrieve, fallback_path,
                                result_entity_ids, retrieve, route,
                                run_tool)

from test.test_graphstore import toy_graph


class FixedEmbedder(Embedder):
    """Embeds every query as the unit x vector"""

    def embed(self, texts):
        return [numpy.array([1.0, 0.0]) for _ in texts]


def ranked_store() -> GraphStore:
    """
    Graph whose entities rank a1 > a2 > a3 > a4 > a5 > b4 > b1
    against the x axis.  b1 hangs off a1, b4 off a4.
    """

    graph = KnowledgeGraph(OntologySchema.open())
    vectors = {
        'a_e0001': [1.0, 0.0],
        'a_e0002': [1.0, 0.1],
        'a_e0003': [1.0, 0.2],
        'a_e0004': [1.0, 0.3],
        'a_e0005': [1.0, 0.4],
        'b_e0001': [0.0, 1.0],
        'b_e0004': [0.1, 1.0],
    }
    for eid, v in vectors.items():
        source = eid.split('_')[0]
        graph.add_entity(Entity(eid, eid, 'thing', source_id=source,
                                source_chunk_id=f'{source}_c001',
                                embedding=v))
    for rid, u, v in (('r00001', 'a_e0001', 'b_e0001'),
                      ('r00002', 'a_e0002', 'a_e0001'),
                      ('r00003', 'b_e0004', 'a_e0004')):
        assert graph.add_relation(Relation(rid, 'related', u, v)) is None
    return GraphStore(graph, FixedEmbedder())


def tool_step(name: str,
              **arguments: typing.Any
              ) -> typing.Dict[str, typing.Any]:
    return {'respond_tool_call': {'name': name, 'arguments': arguments}}


class CallToolTests(unittest.TestCase):
    def setUp(self):
        self.store = GraphStore(toy_graph())

    def test_keyword_search(self):
        ret = call_tool(self.store, 'keyword_search', {'query': 'logs'})
        self.assertEqual(ret, {'hits': [{
            'id': 'eu_e0004', 'name': 'Record-keeping',
            'type': 'RISK_CONTROL',
            'description': 'automatic logs over the lifetime',
            'score': 1.0}]})

    def test_entity_detail_drops_embedding(self):
        ret = call_tool(self.store, 'entity_detail',
                        {'entity_id': 'eu_e0002'})
        self.assertNotIn('embedding', ret['entity'])
        self.assertEqual([r['relation_id'] for r in ret['relations']],
                         ['r00001', 'r00002', 'r00003'])
        self.assertEqual(result_entity_ids(ret),
                         ['eu_e0002', 'eu_e0001', 'eu_e0003',
                          'owasp_e0001'])

    def test_find_path(self):
        ret = call_tool(self.store, 'find_path',
                        {'source_id': 'eu_e0003', 'target_id': 'eu_e0001'})
        self.assertEqual([x['id'] for x in ret['path']],
                         ['eu_e0003', 'eu_e0002', 'eu_e0001'])
        ret = call_tool(self.store, 'find_path',
                        {'source_id': 'eu_e0003', 'target_id': 'eu_e0004'})
        self.assertEqual(ret, {'path': None, 'relations': []})

    def test_expand_neighbors(self):
        ret = call_tool(self.store, 'expand_neighbors',
                        {'entity_id': 'eu_e0001', 'depth': 2})
        self.assertEqual([x['id'] for x in ret['entities']],
                         ['eu_e0001', 'eu_e0002', 'eu_e0003',
                          'owasp_e0001'])
        self.assertFalse(ret['truncated'])

    def test_errors(self):
        with self.assertRaises(ToolArgumentError):
            call_tool(self.store, 'drop_graph', {})
        with self.assertRaises(ToolArgumentError):
            call_tool(self.store, 'keyword_search', {})
        with self.assertRaises(ToolArgumentError):
            call_tool(self.store, 'keyword_search',
                      {'query': 'x', 'k': '5'})
        with self.assertRaises(ToolArgumentError):
            call_tool(self.store, 'expand_neighbors',
                      {'entity_id': 'eu_e0001', 'depth': True})
        with self.assertRaises(EntityNotFound):
            call_tool(self.store, 'entity_detail', {'entity_id': 'nope'})

    def test_run_tool_reports_errors(self):
        self.assertEqual(run_tool(self.store, 'drop_graph', {}),
                         {'error': 'ToolArgumentError: unknown tool: '
                                   'drop_graph'})
        self.assertEqual(
            run_tool(self.store, 'entity_detail', {'entity_id': 'nope'}),
            {'error': 'EntityNotFound: unknown entity id: nope'})
        self.assertIn('error', run_tool(self.store, 'keyword_search',
                                        {'query': 'x', 'k': 0}))


class RouteTests(unittest.TestCase):
    def setUp(self):
        self.store = GraphStore(toy_graph())
        self.prompts = PromptLibrary()

    def route(self,
              reply: typing.Optional[str],
              question: str = 'What is human oversight?',
              task_type: typing.Optional[str] = None):
        provider = ReplayProvider([] if reply is None
                                  else [{'expect_substring': question,
                                         'respond_text': reply}])
        return route(question, self.store, provider, self.prompts,
                     task_type)

    def test_model_reply(self):
        decision = self.route(' Agent\n')
        self.assertEqual(decision.path, RetrievalPath.AGENT)
        self.assertEqual(decision.decided_by, DecidedBy.MODEL)
        decision = self.route('direct')
        self.assertEqual(decision.path, RetrievalPath.DIRECT)

    def test_invalid_reply_uses_task_type(self):
        decision = self.route('I think agent', task_type='T2')
        self.assertEqual(decision.path, RetrievalPath.DIRECT)
        self.assertEqual(decision.decided_by, DecidedBy.FALLBACK)
        decision = self.route('both', task_type='T5')
        self.assertEqual(decision.path, RetrievalPath.AGENT)

    def test_provider_failure(self):
        with self.assertLogs('policykg', level='WARNING'):
            decision = self.route(None, 'Compare logging across policies')
        self.assertEqual(decision.path, RetrievalPath.AGENT)
        self.assertEqual(decision.decided_by, DecidedBy.FALLBACK)

    def test_fallback_keywords(self):
        self.assertEqual(fallback_path('Is a chatbot compliant?'),
                         RetrievalPath.AGENT)
        self.assertEqual(fallback_path('Which NIST functions correspond '
                                       'to Article 9?'),
                         RetrievalPath.AGENT)
        self.assertEqual(fallback_path('What is record-keeping?'),
                         RetrievalPath.DIRECT)
        self.assertEqual(fallback_path('Compare these', 'T1'),
                         RetrievalPath.DIRECT)


class DirectRetrieveTests(unittest.TestCase):
    def test_seeds_and_expansion(self):
        store = ranked_store()
        bundle = direct_retrieve('anything', store)
        self.assertEqual(bundle.entity_ids,
                         ['a_e0001', 'a_e0002', 'a_e0003', 'a_e0004',
                          'a_e0005', 'b_e0001'])
        self.assertEqual(bundle.relation_ids, ['r00001', 'r00002'])
        self.assertEqual(bundle.chunk_ids, ['a_c001', 'b_c001'])
        self.assertEqual([s.name for s in bundle.trace],
                         ['semantic_search', 'expand_neighbors',
                          'expand_neighbors', 'expand_neighbors'])
        self.assertEqual([s.arguments.get('entity_id')
                          for s in bundle.trace[1:]],
                         ['a_e0001', 'a_e0002', 'a_e0003'])

    def test_config(self):
        store = ranked_store()
        bundle = direct_retrieve('anything', store,
                                 AgentConfig(direct_top_k=2,
                                             expand_seeds=1))
        self.assertEqual(bundle.entity_ids,
                         ['a_e0001', 'a_e0002', 'b_e0001'])
        with self.assertRaises(ValueError):
            direct_retrieve('anything', store,
                            AgentConfig(direct_top_k=2, expand_seeds=3))

    def test_question_embedded_once(self):
        store = ranked_store()
        texts: typing.List[str] = []

        class CountingEmbedder(FixedEmbedder):
            def embed(self, batch):
                texts.extend(batch)
                return super().embed(batch)

        store.embedder = CountingEmbedder()
        bundle = direct_retrieve('anything', store)
        self.assertEqual(texts, ['anything'])
        traced = [x for step in bundle.trace
                  for x in result_entity_ids(step.result)]
        self.assertEqual(bundle.entity_ids, list(dict.fromkeys(traced)))

    def test_toy_embedded(self):
        graph = toy_graph()
        embed_graph(graph, HashingEmbedder())
        store = GraphStore(graph, HashingEmbedder())
        bundle = direct_retrieve('data poisoning of training data', store)
        self.assertIn(bundle.entity_ids[0], ('eu_e0002', 'owasp_e0001'))
        self.assertEqual(len(bundle.entity_ids),
                         len(set(bundle.entity_ids)))


class AgentRetrieveTests(unittest.TestCase):
    def setUp(self):
        self.store = GraphStore(toy_graph())
        self.prompts = PromptLibrary()

    def run_agent(self,
                  script: typing.List[typing.Dict[str, typing.Any]],
                  max_steps: int = 7):
        provider = ReplayProvider(script)
        bundle = agent_retrieve('How is data poisoning addressed?',
                                self.store, provider, self.prompts,
                                AgentConfig(max_steps=max_steps))
        return bundle, provider

    def test_terminal_call(self):
        bundle, provider = self.run_agent([
            tool_step('keyword_search', query='poisoning'),
            tool_step('entity_detail', entity_id='eu_e0002'),
            tool_step(TERMINAL_TOOL,
                      evidence_ids=['eu_e0002', 'owasp_e0001', 'bogus',
                                    'eu_e0002']),
        ])
        self.assertEqual(provider.remaining, 0)
        self.assertEqual(bundle.entity_ids, ['eu_e0002', 'owasp_e0001'])
        self.assertEqual(bundle.relation_ids, ['r00003'])
        self.assertEqual([s.name for s in bundle.trace],
                         ['keyword_search', 'entity_detail',
                          TERMINAL_TOOL])

        first = provider.requests[0]
        self.assertEqual(first.messages[0].role, 'system')
        self.assertIn('at most 7 steps', first.messages[0].content)
        assert first.tools is not None
        self.assertEqual([t.name for t in first.tools],
                         [t.name for t in AGENT_TOOLS])
        last = provider.requests[2]
        self.assertEqual(len(last.messages), 6)
        self.assertEqual(last.messages[-1].role, 'tool')
        self.assertEqual(last.messages[-1].tool_call_id, 'call_1')
        detail = json.loads(last.messages[-1].content)
        self.assertEqual(detail['entity']['id'], 'eu_e0002')

    def test_step_cap(self):
        with self.assertLogs('policykg', level='WARNING'):
            bundle, provider = self.run_agent([
                tool_step('keyword_search', query='oversight'),
                tool_step('keyword_search', query='logs'),
                tool_step('keyword_search', query='oversight'),
            ], max_steps=3)
        self.assertEqual(provider.remaining, 0)
        self.assertEqual(bundle.entity_ids, ['eu_e0003', 'eu_e0004'])
        self.assertEqual(len(bundle.trace), 3)

    def test_unknown_tool(self):
        bundle, _ = self.run_agent([
            tool_step('drop_graph'),
            tool_step(TERMINAL_TOOL, evidence_ids=['eu_e0001']),
        ])
        self.assertEqual(bundle.trace[0].result,
                         {'error': 'ToolArgumentError: unknown tool: '
                                   'drop_graph'})
        self.assertEqual(bundle.entity_ids, ['eu_e0001'])

    def test_text_reply_consumes_step(self):
        bundle, provider = self.run_agent([
            {'respond_text': 'Let me think about it.'},
            tool_step(TERMINAL_TOOL, evidence_ids=['eu_e0003']),
        ], max_steps=2)
        self.assertEqual(bundle.entity_ids, ['eu_e0003'])
        self.assertEqual([s.name for s in bundle.trace], [TERMINAL_TOOL])
        self.assertEqual(provider.requests[1].messages[-2].role,
                         'assistant')

    def test_text_only_hits_cap(self):
        with self.assertLogs('policykg', level='WARNING'):
            bundle, provider = self.run_agent([
                {'respond_text': 'a'},
                {'respond_text': 'b'},
            ], max_steps=2)
        self.assertEqual(bundle.entity_ids, [])
        self.assertEqual(bundle.trace, [])

    def test_malformed_arguments(self):
        with self.assertLogs('policykg', level='WARNING'):
            bundle, provider = self.run_agent([
                {'respond_tool_call': {'name': 'keyword_search',
                                       'arguments': '{"query": '}},
                tool_step(TERMINAL_TOOL, evidence_ids=['eu_e0004']),
            ])
        self.assertEqual(bundle.entity_ids, ['eu_e0004'])
        self.assertIn('could not be parsed',
                      provider.requests[1].messages[-1].content)

    def test_invalid_evidence(self):
        bundle, _ = self.run_agent([
            tool_step(TERMINAL_TOOL, evidence_ids='eu_e0001'),
            tool_step(TERMINAL_TOOL, evidence_ids=['eu_e0001']),
        ])
        self.assertIn('error', bundle.trace[0].result)
        self.assertEqual(bundle.entity_ids, ['eu_e0001'])


class RetrieveTests(unittest.TestCase):
    def test_forced_agent(self):
        store = GraphStore(toy_graph())
        provider = ReplayProvider([
            tool_step(TERMINAL_TOOL, evidence_ids=['eu_e0002']),
        ])
        decision, bundle = retrieve('What is data poisoning?', store,
                                    provider, PromptLibrary(),
                                    route_mode=RouteMode.AGENT)
        self.assertEqual(decision.path, RetrievalPath.AGENT)
        self.assertEqual(decision.decided_by, DecidedBy.FORCED)
        self.assertEqual(bundle.entity_ids, ['eu_e0002'])
        self.assertEqual(len(provider.requests), 1)

    def test_adaptive_direct(self):
        store = ranked_store()
        provider = ReplayProvider([{'respond_text': 'direct'}])
        decision, bundle = retrieve('What is a1?', store, provider,
                                    PromptLibrary())
        self.assertEqual(decision.decided_by, DecidedBy.MODEL)
        self.assertEqual(bundle.entity_ids[0], 'a_e0001')
        self.assertEqual(len(provider.requests), 1)
