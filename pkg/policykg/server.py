# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" JSON-RPC 2.0 tool server over standard input/output. """

import json
import logging
import typing

from pathlib import Path

import jinja2

from policykg import __version__
from policykg.config import Config
from policykg.evalkit import (DEFAULT_QUESTIONS, aggregate, format_table,
                              load_questions, run_eval)
from policykg.graphstore import GraphStore
from policykg.llm import ChatProvider, Embedder, ToolDeclaration
from policykg.model import (SchemaMode, OntologySchema, PolicySource,
                            chunk_to_json, verify_graph)
from policykg.prompts import PROMPT_DESCRIPTIONS, PromptLibrary
from policykg.retrieval import (GRAPH_TOOLS, ToolArgumentError, call_tool,
                                get_arg, object_schema)
from policykg.storage import (chunk_store_path, dump_json, graph_to_json,
                              load_chunk_store, load_chunks, load_graph,
                              save_chunks, save_graph, save_results)
from policykg.synthesis import DEFAULT_ICL_POOL, Condition, run_condition
from policykg.workflow import (chunk_sources, extract_graph, link_graph,
                               make_pipeline, make_proposer)


JSONRPC_VERSION = '2.0'
PROTOCOL_VERSION = '2024-11-05'
SERVER_NAME = 'policykg'

PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602
OPERATION_ERROR = -32000

RESOURCE_PREFIX = 'policykg://'

log = logging.getLogger('policykg')


class RpcError(Exception):
    def __init__(self,
                 code: int,
                 message: str,
                 data: typing.Any = None
                 ) -> None:
        super().__init__(message)
        self.code = code
        self.message = message
        self.data = data


ToolHandler = typing.Callable[[typing.Mapping[str, typing.Any]],
                              typing.Dict[str, typing.Any]]


class Resource(typing.NamedTuple):
    uri: str
    description: str


def condition_label(schema: OntologySchema) -> str:
    return 'AIRO' if schema.mode == SchemaMode.CLOSED else 'OPEN'


class PolicyKGServer(object):
    """
    Pipeline operations exposed as tools, resources and prompts

    The loaded graph is never modified: build tools read and write
    the files named in their arguments.  Requests are handled one
    at a time.
    """

    def __init__(self,
                 config: Config,
                 graph_path: Path,
                 provider: ChatProvider,
                 embedder: Embedder,
                 judge_provider: typing.Optional[ChatProvider] = None,
                 questions_path: typing.Optional[Path] = None,
                 results_path: typing.Optional[Path] = None
                 ) -> None:
        self.config = config
        self.graph_path = graph_path
        self.provider = provider
        self.embedder = embedder
        self.judge_provider = judge_provider
        self.questions_path = questions_path or DEFAULT_QUESTIONS
        self.results_path = results_path
        self.prompts = PromptLibrary(config.templates_dir)

        self.graph = load_graph(graph_path)
        self.chunks_path = chunk_store_path(graph_path)
        self.chunks = (load_chunks(self.chunks_path)
                       if self.chunks_path.exists() else {})
        self.store = GraphStore(self.graph, embedder)

        self.tools: typing.Dict[str, typing.Tuple[ToolDeclaration,
                                                  ToolHandler]] = {}
        for decl in GRAPH_TOOLS:
            self.tools[decl.name] = (decl, self._graph_tool(decl.name))
        for decl, handler in (
                (ToolDeclaration(
                    'chunk_document',
                    'Split a policy document into chunks.',
                    object_schema({
                        'source_id': {'type': 'string'},
                        'text': {'type': 'string'},
                        'title': {'type': 'string'},
                        'proposer': {'type': 'string',
                                     'enum': ['paragraph', 'llm']},
                        'output': {'type': 'string',
                                   'description': 'chunk store to write'},
                    }, ['source_id', 'text'])),
                 self.tool_chunk_document),
                (ToolDeclaration(
                    'extract_chunks',
                    'Extract a new knowledge graph from a chunk store.',
                    object_schema({
                        'chunks_file': {'type': 'string'},
                        'output': {'type': 'string'},
                        'schema_mode': {'type': 'string',
                                        'enum': ['closed', 'open']},
                    }, ['chunks_file', 'output'])),
                 self.tool_extract_chunks),
                (ToolDeclaration(
                    'link_graph',
                    'Add cross-policy correspondences to a graph file.',
                    object_schema({
                        'graph_file': {'type': 'string'},
                        'output': {'type': 'string'},
                    }, ['graph_file', 'output'])),
                 self.tool_link_graph),
                (ToolDeclaration(
                    'schema_summary',
                    'Describe the schema and size of the loaded graph.',
                    object_schema({}, [])),
                 self.tool_schema_summary),
                (ToolDeclaration(
                    'ask_question',
                    'Answer a question with or without graph context.',
                    object_schema({
                        'question': {'type': 'string'},
                        'condition': {'type': 'string',
                                      'enum': ['kg', 'nc']},
                        'task_type': {'type': 'string'},
                    }, ['question'])),
                 self.tool_ask_question),
                (ToolDeclaration(
                    'run_eval',
                    'Evaluate the question set against the loaded graph.',
                    object_schema({
                        'questions_file': {'type': 'string'},
                        'runs': {'type': 'integer'},
                        'judge': {'type': 'boolean'},
                    }, [])),
                 self.tool_run_eval),
                (ToolDeclaration(
                    'verify_graph',
                    'Check a graph file (default: the loaded graph) '
                    'for invariant violations.',
                    object_schema({'graph_file': {'type': 'string'}}, [])),
                 self.tool_verify_graph)):
            self.tools[decl.name] = (decl, handler)

        self.resources = [
            Resource('graph', 'the loaded knowledge graph'),
            Resource('chunks', 'chunk store of the loaded graph'),
            Resource('schema', 'schema of the loaded graph'),
            Resource('icl-pool', 'in-context example pool'),
            Resource('questions', 'evaluation question set'),
            Resource('results', 'latest evaluation results'),
            Resource('templates', 'prompt template sources'),
        ]

    def _graph_tool(self, name: str) -> ToolHandler:
        def handler(arguments: typing.Mapping[str, typing.Any]
                    ) -> typing.Dict[str, typing.Any]:
            return call_tool(self.store, name, arguments)
        return handler

    def tool_chunk_document(self,
                            arguments: typing.Mapping[str, typing.Any]
                            ) -> typing.Dict[str, typing.Any]:
        source = PolicySource(get_arg(arguments, 'source_id', str),
                              get_arg(arguments, 'title', str, ''),
                              get_arg(arguments, 'text', str))
        proposer = make_proposer(
            get_arg(arguments, 'proposer', str, 'paragraph'),
            self.provider, self.prompts, self.config.chunker)
        chunks = chunk_sources([source], self.config.chunker, proposer)
        output = get_arg(arguments, 'output', str, '')
        if output:
            save_chunks(chunks, Path(output),
                        titles={source.id: source.title})
        return {'chunks': [chunk_to_json(c) for c in chunks]}

    def tool_extract_chunks(self,
                            arguments: typing.Mapping[str, typing.Any]
                            ) -> typing.Dict[str, typing.Any]:
        chunks_file = Path(get_arg(arguments, 'chunks_file', str))
        output = Path(get_arg(arguments, 'output', str))
        mode = get_arg(arguments, 'schema_mode', str,
                       self.config.schema_mode.value)
        try:
            schema = OntologySchema.for_mode(SchemaMode(mode),
                                             self.config.schema_file)
        except ValueError:
            raise ToolArgumentError(f'invalid schema_mode: {mode!r}')
        chunks, titles = load_chunk_store(chunks_file)
        graph, report = extract_graph(chunks.values(), schema,
                                      self.provider, self.prompts,
                                      self.config.extractor, titles=titles)
        save_graph(graph, output)
        save_chunks(chunks.values(), chunk_store_path(output),
                    titles=titles)
        return {
            'entities': len(graph.entities),
            'relations': len(graph.relations),
            'merges': len(report.merges),
            'rejected': sum(len(c.rejected) for c in report.chunks),
            'failed_chunks': report.failed_chunks,
        }

    def tool_link_graph(self,
                        arguments: typing.Mapping[str, typing.Any]
                        ) -> typing.Dict[str, typing.Any]:
        graph_file = Path(get_arg(arguments, 'graph_file', str))
        output = Path(get_arg(arguments, 'output', str))
        graph = load_graph(graph_file)
        new = link_graph(graph, self.config.linker, self.embedder)
        save_graph(graph, output)
        chunks_file = chunk_store_path(graph_file)
        if chunks_file.exists() and output != graph_file:
            save_chunks(load_chunks(chunks_file).values(),
                        chunk_store_path(output))
        return {'links': [r.id for r in new]}

    def tool_schema_summary(self,
                            arguments: typing.Mapping[str, typing.Any]
                            ) -> typing.Dict[str, typing.Any]:
        return {'summary': self.store.schema_summary()}

    def tool_ask_question(self,
                          arguments: typing.Mapping[str, typing.Any]
                          ) -> typing.Dict[str, typing.Any]:
        question = get_arg(arguments, 'question', str)
        condition = get_arg(arguments, 'condition', str, 'kg')
        try:
            cond = Condition(condition)
        except ValueError:
            raise ToolArgumentError(f'invalid condition: {condition!r}')
        task_type = arguments.get('task_type')
        pipeline = make_pipeline(self.config, self.provider, self.embedder,
                                 self.prompts, self.graph, self.chunks)
        ans = run_condition(question, cond, pipeline, task_type=task_type)
        return {
            'answer': ans.answer,
            'evidence_ids': (ans.bundle.entity_ids
                             if ans.bundle is not None else []),
            'diagnostics': ans.diagnostics._asdict(),
        }

    def tool_run_eval(self,
                      arguments: typing.Mapping[str, typing.Any]
                      ) -> typing.Dict[str, typing.Any]:
        runs = get_arg(arguments, 'runs', int, 1)
        use_judge = arguments.get('judge', self.judge_provider is not None)
        if use_judge and self.judge_provider is None:
            raise ToolArgumentError('no judge provider configured')
        questions = load_questions(
            Path(get_arg(arguments, 'questions_file', str,
                         str(self.questions_path))),
            require_excerpt=bool(use_judge))
        label = condition_label(self.graph.schema)
        pipelines = {
            'NC': make_pipeline(self.config, self.provider, self.embedder,
                                self.prompts),
            label: make_pipeline(self.config, self.provider, self.embedder,
                                 self.prompts, self.graph, self.chunks),
        }
        records = run_eval(questions, ['NC', label], runs, pipelines,
                           self.judge_provider if use_judge else None,
                           self.prompts)
        table = aggregate(records)
        if self.results_path is not None:
            save_results(records, table, self.results_path)
        return {
            'table': list(format_table(table)),
            'errors': sum(1 for r in records if r.error),
        }

    def tool_verify_graph(self,
                          arguments: typing.Mapping[str, typing.Any]
                          ) -> typing.Dict[str, typing.Any]:
        graph_file = get_arg(arguments, 'graph_file', str, '')
        if graph_file:
            path = Path(graph_file)
            graph = load_graph(path, verify=False)
            chunks_file = chunk_store_path(path)
            chunks = (load_chunks(chunks_file) if chunks_file.exists()
                      else None)
        else:
            graph = self.graph
            chunks = self.chunks or None
        violations = verify_graph(graph, chunks)
        return {'violations': [v._asdict() for v in violations]}

    def read_resource(self, name: str) -> str:
        if name == 'graph':
            return dump_json(graph_to_json(self.graph))
        elif name == 'chunks':
            return dump_json({k: chunk_to_json(v)
                              for k, v in self.chunks.items()})
        elif name == 'schema':
            return dump_json(self.graph.schema.to_json())
        paths = {
            'icl-pool': self.config.icl_pool or DEFAULT_ICL_POOL,
            'questions': self.questions_path,
            'results': self.results_path,
        }
        if name in paths:
            path = paths[name]
            if path is None or not path.exists():
                raise RpcError(OPERATION_ERROR,
                               f'resource not available: {name}')
            with open(path, 'r') as f:
                return f.read()
        elif name == 'templates':
            return dump_json({n: self.prompts.source(n)
                              for n in self.prompts.names()})
        raise RpcError(INVALID_PARAMS, f'unknown resource: {name}')

    def dispatch(self,
                 method: str,
                 params: typing.Mapping[str, typing.Any]
                 ) -> typing.Any:
        if method == 'initialize':
            return {
                'protocolVersion': PROTOCOL_VERSION,
                'capabilities': {'tools': {}, 'resources': {},
                                 'prompts': {}},
                'serverInfo': {'name': SERVER_NAME, 'version': __version__},
            }
        elif method == 'tools/list':
            return {'tools': [
                {'name': decl.name,
                 'description': decl.description,
                 'inputSchema': decl.parameters}
                for decl, _ in self.tools.values()]}
        elif method == 'tools/call':
            name = params.get('name')
            if name not in self.tools:
                raise RpcError(INVALID_PARAMS, f'unknown tool: {name!r}')
            arguments = params.get('arguments', {})
            if not isinstance(arguments, dict):
                raise RpcError(INVALID_PARAMS,
                               'tool arguments must be an object')
            log.info(f'Tool call: {name}')
            result = self.tools[name][1](arguments)
            return {
                'content': [{'type': 'text',
                             'text': json.dumps(result, sort_keys=True)}],
                'isError': False,
            }
        elif method == 'resources/list':
            return {'resources': [
                {'uri': RESOURCE_PREFIX + r.uri,
                 'name': r.uri,
                 'description': r.description,
                 'mimeType': 'application/json'}
                for r in self.resources]}
        elif method == 'resources/read':
            uri = params.get('uri')
            if not isinstance(uri, str) or not uri.startswith(
                    RESOURCE_PREFIX):
                raise RpcError(INVALID_PARAMS, f'invalid resource uri: '
                                               f'{uri!r}')
            return {'contents': [{
                'uri': uri,
                'mimeType': 'application/json',
                'text': self.read_resource(uri[len(RESOURCE_PREFIX):]),
            }]}
        elif method == 'prompts/list':
            return {'prompts': [
                {'name': name,
                 'description': PROMPT_DESCRIPTIONS.get(name, '')}
                for name in self.prompts.names()]}
        elif method == 'prompts/get':
            name = params.get('name')
            if name not in self.prompts.names():
                raise RpcError(INVALID_PARAMS, f'unknown prompt: {name!r}')
            arguments = params.get('arguments', {})
            if not isinstance(arguments, dict):
                raise RpcError(INVALID_PARAMS,
                               'prompt arguments must be an object')
            try:
                text = self.prompts.render(name, **arguments)
            except jinja2.UndefinedError as e:
                raise RpcError(INVALID_PARAMS,
                               f'missing prompt argument: {e}')
            return {
                'description': PROMPT_DESCRIPTIONS.get(name, ''),
                'messages': [{'role': 'user',
                              'content': {'type': 'text', 'text': text}}],
            }
        raise RpcError(METHOD_NOT_FOUND, f'method not found: {method}')

    def handle_message(self, line: str) -> typing.Optional[dict]:
        """
        Handle one request line and return the response object,
        or None for notifications
        """

        try:
            msg = json.loads(line)
        except json.JSONDecodeError as e:
            return error_response(None, PARSE_ERROR, f'parse error: {e}')
        if not isinstance(msg, dict):
            return error_response(None, INVALID_REQUEST,
                                  'request must be an object')
        msg_id = msg.get('id')
        method = msg.get('method')
        params = msg.get('params', {})
        if msg.get('jsonrpc') != JSONRPC_VERSION or not isinstance(
                method, str):
            return error_response(msg_id, INVALID_REQUEST,
                                  'invalid request')
        notification = 'id' not in msg

        try:
            if not isinstance(params, dict):
                raise RpcError(INVALID_PARAMS, 'params must be an object')
            if method.startswith('notifications/'):
                return None
            result = self.dispatch(method, params)
        except RpcError as e:
            if notification:
                return None
            return error_response(msg_id, e.code, e.message, e.data)
        except ToolArgumentError as e:
            log.warning(f'{method}: {e}')
            if notification:
                return None
            return error_response(msg_id, INVALID_PARAMS, str(e),
                                  {'type': type(e).__name__,
                                   'message': str(e)})
        except Exception as e:
            log.error(f'{method}: {type(e).__name__}: {e}')
            if notification:
                return None
            return error_response(msg_id, OPERATION_ERROR,
                                  'operation failed',
                                  {'type': type(e).__name__,
                                   'message': str(e)})

        if notification:
            return None
        return {'jsonrpc': JSONRPC_VERSION, 'id': msg_id, 'result': result}

    def serve(self,
              stdin: typing.TextIO,
              stdout: typing.TextIO
              ) -> None:
        """Read one request per line until end of input"""
        log.info(f'Serving {self.graph_path} '
                 f'({len(self.graph.entities)} entities)')
        for line in stdin:
            if not line.strip():
                continue
            resp = self.handle_message(line)
            if resp is not None:
                stdout.write(json.dumps(resp, sort_keys=True) + '\n')
                stdout.flush()


def error_response(msg_id: typing.Any,
                   code: int,
                   message: str,
                   data: typing.Any = None
                   ) -> typing.Dict[str, typing.Any]:
    error: typing.Dict[str, typing.Any] = {'code': code, 'message': message}
    if data is not None:
        error['data'] = data
    return {'jsonrpc': JSONRPC_VERSION, 'id': msg_id, 'error': error}
