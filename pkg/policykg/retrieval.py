# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Adaptive retrieval: routing, direct path and agent loop. """

import enum
import json
import logging
import typing

from policykg.extractor import one_line
from policykg.graphstore import GraphStore, GraphStoreError
from policykg.llm import (ChatMessage, ChatProvider, ChatRequest,
                          ProviderError, ProviderProtocolError,
                          ToolDeclaration)
from policykg.model import Entity, Relation
from policykg.prompts import PromptLibrary


AGENT_KEYWORDS = ('across', 'compare', 'correspond', 'complian',
                  'multiple', 'all three')
DIRECT_TASK_TYPES = ('T1', 'T2', 'T3')
AGENT_TASK_TYPES = ('T4', 'T5', 'T6')
MAX_RESULT_ENTITIES = 20
TERMINAL_TOOL = 'synthesize_answer'

NUDGE_TEXT = ('Use one of the provided tools.  When you have enough '
              'evidence, call synthesize_answer with the entity ids.')
NUDGE_MALFORMED = ('Your last tool call could not be parsed ({error}).  '
                   'Call a tool with valid JSON arguments.')

log = logging.getLogger('policykg')


class RetrievalPath(enum.Enum):
    DIRECT = 'direct'
    AGENT = 'agent'


class DecidedBy(enum.Enum):
    MODEL = 'model'
    FALLBACK = 'fallback'
    FORCED = 'forced'


class RouteMode(enum.Enum):
    ADAPTIVE = 'adaptive'
    DIRECT = 'direct'
    AGENT = 'agent'


class ToolArgumentError(ValueError):
    pass


class RouteDecision(typing.NamedTuple):
    path: RetrievalPath
    rationale: str
    decided_by: DecidedBy


class TraceStep(typing.NamedTuple):
    name: str
    arguments: typing.Dict[str, typing.Any]
    result: typing.Dict[str, typing.Any]


class EvidenceBundle(typing.NamedTuple):
    entity_ids: typing.List[str]
    relation_ids: typing.List[str]
    chunk_ids: typing.List[str]
    trace: typing.List[TraceStep]


class AgentConfig(typing.NamedTuple):
    max_steps: int = 7
    direct_top_k: int = 5
    expand_seeds: int = 3

    def check(self) -> None:
        if self.max_steps < 1:
            raise ValueError(f'max_steps must be at least 1: '
                             f'{self.max_steps}')
        if not 1 <= self.expand_seeds <= self.direct_top_k:
            raise ValueError(f'expand_seeds ({self.expand_seeds}) must be '
                             f'between 1 and direct_top_k '
                             f'({self.direct_top_k})')


def object_schema(properties: typing.Dict[str, typing.Any],
                  required: typing.List[str]
                  ) -> typing.Dict[str, typing.Any]:
    return {'type': 'object', 'properties': properties,
            'required': required}


QUERY_PARAMS = object_schema({
    'query': {'type': 'string', 'description': 'search text'},
    'k': {'type': 'integer', 'description': 'max hits (default 10)'},
}, ['query'])

GRAPH_TOOLS = [
    ToolDeclaration(
        'keyword_search',
        'Find entities whose name or description contains query words.',
        QUERY_PARAMS),
    ToolDeclaration(
        'semantic_search',
        'Find entities semantically similar to the query.',
        QUERY_PARAMS),
    ToolDeclaration(
        'expand_neighbors',
        'List entities and relations around an entity.',
        object_schema({
            'entity_id': {'type': 'string'},
            'depth': {'type': 'integer',
                      'description': 'hops (default 1)'},
        }, ['entity_id'])),
    ToolDeclaration(
        'entity_detail',
        'Show all fields of an entity and its relations.',
        object_schema({'entity_id': {'type': 'string'}}, ['entity_id'])),
    ToolDeclaration(
        'find_path',
        'Find the shortest connection between two entities.',
        object_schema({
            'source_id': {'type': 'string'},
            'target_id': {'type': 'string'},
            'max_len': {'type': 'integer',
                        'description': 'max relations (default 4)'},
        }, ['source_id', 'target_id'])),
]

AGENT_TOOLS = GRAPH_TOOLS + [
    ToolDeclaration(
        TERMINAL_TOOL,
        'Finish exploring and answer using the given evidence entities.',
        object_schema({
            'evidence_ids': {'type': 'array', 'items': {'type': 'string'}},
        }, ['evidence_ids'])),
]


def compact_entity(entity: Entity) -> typing.Dict[str, str]:
    return {
        'id': entity.id,
        'name': entity.name,
        'type': entity.entity_type,
        'description': one_line(entity.description),
    }


def compact_relation(rel: Relation) -> typing.Dict[str, str]:
    return {
        'id': rel.id,
        'type': rel.relation_type,
        'source': rel.source_entity_id,
        'target': rel.target_entity_id,
    }


_REQUIRED = object()


def get_arg(arguments: typing.Mapping[str, typing.Any],
            name: str,
            kind: type,
            default: typing.Any = _REQUIRED
            ) -> typing.Any:
    value = arguments.get(name, default)
    if value is _REQUIRED:
        raise ToolArgumentError(f'missing argument: {name}')
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ToolArgumentError(
            f'argument {name} must be of type {kind.__name__}')
    return value


def call_tool(store: GraphStore,
              name: str,
              arguments: typing.Mapping[str, typing.Any]
              ) -> typing.Dict[str, typing.Any]:
    """
    Execute graph tool `name` and return its compact JSON result

    Raises ToolArgumentError for unknown tools and bad arguments,
    GraphStoreError for failed graph queries.
    """

    graph = store.graph
    if name in ('keyword_search', 'semantic_search'):
        hits = getattr(store, name)(
            get_arg(arguments, 'query', str),
            get_arg(arguments, 'k', int, 10))
        return {'hits': [dict(compact_entity(graph.entities[h.entity_id]),
                              score=round(h.score, 6))
                         for h in hits[:MAX_RESULT_ENTITIES]]}
    elif name == 'expand_neighbors':
        sub = store.expand_neighbors(
            get_arg(arguments, 'entity_id', str),
            get_arg(arguments, 'depth', int, 1))
        shown = sub.entity_ids[:MAX_RESULT_ENTITIES]
        return {
            'entities': [compact_entity(graph.entities[x]) for x in shown],
            'relations': [compact_relation(graph.relations[r])
                          for r in store.relations_among(shown)],
            'truncated': len(sub.entity_ids) > len(shown),
        }
    elif name == 'entity_detail':
        detail = store.entity_detail(get_arg(arguments, 'entity_id', str))
        detail['entity'].pop('embedding', None)
        detail['relations'] = detail['relations'][:MAX_RESULT_ENTITIES]
        return detail
    elif name == 'find_path':
        path = store.find_path(
            get_arg(arguments, 'source_id', str),
            get_arg(arguments, 'target_id', str),
            get_arg(arguments, 'max_len', int, 4))
        if path is None:
            return {'path': None, 'relations': []}
        return {
            'path': [compact_entity(graph.entities[x])
                     for x in path.entity_ids],
            'relations': [compact_relation(graph.relations[r])
                          for r in path.relation_ids],
        }
    raise ToolArgumentError(f'unknown tool: {name}')


def run_tool(store: GraphStore,
             name: str,
             arguments: typing.Mapping[str, typing.Any]
             ) -> typing.Dict[str, typing.Any]:
    """
    Execute graph tool `name` for the agent

    Failures (unknown tool, bad arguments, unknown ids) are reported
    as {"error": ...} results, never raised.
    """

    try:
        return call_tool(store, name, arguments)
    except (GraphStoreError, ValueError) as e:
        return {'error': f'{type(e).__name__}: {e}'}


def result_entity_ids(result: typing.Mapping[str, typing.Any]
                      ) -> typing.List[str]:
    """Entity ids mentioned in a tool result, in order of appearance"""
    ret = []
    for key in ('hits', 'entities', 'path'):
        for x in result.get(key) or []:
            ret.append(x['id'])
    if 'entity' in result:
        ret.append(result['entity']['id'])
        ret.extend(r['other_id'] for r in result.get('relations', []))
    return ret


def make_bundle(store: GraphStore,
                entity_ids: typing.Iterable[str],
                trace: typing.List[TraceStep]
                ) -> EvidenceBundle:
    """
    Build an evidence bundle from `entity_ids`

    Ids are deduplicated preserving the first occurrence; unknown ids
    are dropped.
    """

    ids = list(dict.fromkeys(x for x in entity_ids
                             if x in store.graph.entities))
    chunks = list(dict.fromkeys(store.graph.entities[x].source_chunk_id
                                for x in ids))
    return EvidenceBundle(ids, store.relations_among(ids), chunks, trace)


def fallback_path(question: str,
                  task_type: typing.Optional[str] = None
                  ) -> RetrievalPath:
    if task_type in DIRECT_TASK_TYPES:
        return RetrievalPath.DIRECT
    if task_type in AGENT_TASK_TYPES:
        return RetrievalPath.AGENT
    lowered = question.lower()
    if any(k in lowered for k in AGENT_KEYWORDS):
        return RetrievalPath.AGENT
    return RetrievalPath.DIRECT


def route(question: str,
          store: GraphStore,
          provider: ChatProvider,
          prompts: PromptLibrary,
          task_type: typing.Optional[str] = None
          ) -> RouteDecision:
    """
    Decide the retrieval path for `question`

    The model must answer exactly "direct" or "agent" (case and
    surrounding whitespace ignored).  Any other reply, or a provider
    failure, selects the path by task type hint or keywords.
    """

    prompt = prompts.render('route', question=question,
                            schema_summary=store.schema_summary())
    try:
        resp = provider.complete(ChatRequest(
            messages=[ChatMessage('user', prompt)],
            model_id=provider.model_id))
    except ProviderError as e:
        log.warning(f'Routing call failed, using fallback: {e}')
        decision = RouteDecision(fallback_path(question, task_type),
                                 f'provider failure: {e}',
                                 DecidedBy.FALLBACK)
    else:
        reply = (resp.text or '').strip().lower()
        if reply in ('direct', 'agent'):
            decision = RouteDecision(RetrievalPath(reply),
                                     f'model replied {reply!r}',
                                     DecidedBy.MODEL)
        else:
            decision = RouteDecision(fallback_path(question, task_type),
                                     f'invalid routing reply: '
                                     f'{one_line(resp.text or "", 60)!r}',
                                     DecidedBy.FALLBACK)
    log.info(f'Routed to {decision.path.value} '
             f'({decision.decided_by.value})')
    return decision


def direct_retrieve(question: str,
                    store: GraphStore,
                    config: AgentConfig = AgentConfig()
                    ) -> EvidenceBundle:
    """
    Retrieve evidence without any completion call

    The top direct_top_k entities by semantic similarity are seeds;
    the first expand_seeds of them are expanded by one hop.
    Evidence is seeds in rank order followed by expansions in BFS
    order, both as listed in the traced tool results (at most
    MAX_RESULT_ENTITIES per result).
    """

    config.check()
    args: typing.Dict[str, typing.Any] = {'query': question,
                                          'k': config.direct_top_k}
    result = call_tool(store, 'semantic_search', args)
    trace = [TraceStep('semantic_search', args, result)]
    seeds = result_entity_ids(result)
    ids = list(seeds)
    for seed in seeds[:config.expand_seeds]:
        args = {'entity_id': seed, 'depth': 1}
        result = call_tool(store, 'expand_neighbors', args)
        trace.append(TraceStep('expand_neighbors', args, result))
        ids.extend(result_entity_ids(result))
    return make_bundle(store, ids, trace)


def agent_retrieve(question: str,
                   store: GraphStore,
                   provider: ChatProvider,
                   prompts: PromptLibrary,
                   config: AgentConfig = AgentConfig()
                   ) -> EvidenceBundle:
    """
    Collect evidence with a bounded tool-calling loop

    Every model reply consumes one step, whether it is a graph tool
    call, an invalid call or plain text.  The loop ends when the model
    calls synthesize_answer; its evidence ids (unknown ones dropped)
    form the bundle.  After max_steps without the terminal call,
    every entity id seen in tool results is used instead.
    """

    config.check()
    messages = [
        ChatMessage('system', prompts.render(
            'agent_system', max_steps=config.max_steps,
            schema_summary=store.schema_summary())),
        ChatMessage('user', question),
    ]
    trace: typing.List[TraceStep] = []
    seen: typing.List[str] = []

    for step in range(1, config.max_steps + 1):
        try:
            resp = provider.complete(ChatRequest(
                messages=list(messages), tools=AGENT_TOOLS,
                model_id=provider.model_id))
        except ProviderProtocolError as e:
            log.warning(f'Step {step}: malformed tool call: {e}')
            messages.append(ChatMessage(
                'user', NUDGE_MALFORMED.format(error=e)))
            continue

        call = resp.tool_call
        if call is None:
            log.info(f'Step {step}: text reply instead of a tool call')
            messages += [ChatMessage('assistant', resp.text or ''),
                         ChatMessage('user', NUDGE_TEXT)]
            continue

        if call.name == TERMINAL_TOOL:
            evidence = call.arguments.get('evidence_ids')
            if (isinstance(evidence, list)
                    and all(isinstance(x, str) for x in evidence)):
                bundle = make_bundle(store, evidence, trace)
                trace.append(TraceStep(call.name, call.arguments,
                                       {'evidence_ids': bundle.entity_ids}))
                log.info(f'Step {step}: {TERMINAL_TOOL} with '
                         f'{len(bundle.entity_ids)} entities')
                return bundle
            result: typing.Dict[str, typing.Any] = {
                'error': 'evidence_ids must be a list of entity ids'}
        else:
            result = run_tool(store, call.name, call.arguments)
            seen.extend(result_entity_ids(result))

        log.info(f'Step {step}: {call.name} '
                 f'{json.dumps(call.arguments, sort_keys=True)}'
                 + (f' -> {result["error"]}' if 'error' in result else ''))
        trace.append(TraceStep(call.name, call.arguments, result))
        messages += [
            ChatMessage('assistant', '', tool_call=call),
            ChatMessage('tool', json.dumps(result, sort_keys=True),
                        tool_call_id=call.id),
        ]

    log.warning(f'Agent loop hit the step cap ({config.max_steps}), '
                f'using all {len(set(seen))} entities seen')
    return make_bundle(store, seen, trace)


def retrieve(question: str,
             store: GraphStore,
             provider: ChatProvider,
             prompts: PromptLibrary,
             config: AgentConfig = AgentConfig(),
             route_mode: RouteMode = RouteMode.ADAPTIVE,
             task_type: typing.Optional[str] = None
             ) -> typing.Tuple[RouteDecision, EvidenceBundle]:
    """Route (unless forced) and run the selected retrieval path"""
    if route_mode == RouteMode.ADAPTIVE:
        decision = route(question, store, provider, prompts,
                         task_type=task_type)
    else:
        decision = RouteDecision(RetrievalPath(route_mode.value),
                                 'path forced by configuration',
                                 DecidedBy.FORCED)
    if decision.path == RetrievalPath.DIRECT:
        bundle = direct_retrieve(question, store, config)
    else:
        bundle = agent_retrieve(question, store, provider, prompts, config)
    return decision, bundle
