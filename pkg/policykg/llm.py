# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Chat-completion and embedding providers. """

import hashlib
import json
import logging
import re
import threading
import time
import typing

from pathlib import Path

import numpy
import requests

from policykg.model import Entity, KnowledgeGraph


DEFAULT_TIMEOUT = 30
RETRY_ATTEMPTS = 3
HASHING_DIM = 256

TOKEN_RE = re.compile(r'[a-z0-9]+')
FENCED_JSON_RE = re.compile(r'```(?:json)?\s*\n(.*?)\n\s*```', re.DOTALL)

log = logging.getLogger('policykg')

EmbeddingVector = numpy.ndarray


class InvalidRequest(ValueError):
    pass


class ProviderError(Exception):
    pass


class ProviderTransportError(ProviderError):
    """Network or server-side failure, retried before being raised"""
    pass


class ProviderProtocolError(ProviderError):
    """Provider answered with content that could not be understood"""

    def __init__(self,
                 message: str,
                 raw: typing.Any = None
                 ) -> None:
        super().__init__(message)
        self.raw = raw


class ScriptExhausted(ProviderError):
    pass


class ScriptMismatch(ProviderError):
    pass


class UndefinedSimilarity(ValueError):
    pass


class ToolDeclaration(typing.NamedTuple):
    name: str
    description: str
    parameters: typing.Dict[str, typing.Any]

    def to_json(self) -> typing.Dict[str, typing.Any]:
        return {
            'name': self.name,
            'description': self.description,
            'parameters': self.parameters,
        }


class ToolCall(typing.NamedTuple):
    name: str
    arguments: typing.Dict[str, typing.Any]
    id: str = ''


class ChatMessage(typing.NamedTuple):
    role: str
    content: str
    tool_call: typing.Optional[ToolCall] = None
    tool_call_id: typing.Optional[str] = None


class ChatRequest(typing.NamedTuple):
    messages: typing.List[ChatMessage]
    tools: typing.Optional[typing.List[ToolDeclaration]] = None
    temperature: float = 0.0
    model_id: str = ''

    def check(self) -> None:
        if not self.messages:
            raise InvalidRequest('chat request without messages')
        if not numpy.isfinite(self.temperature) or self.temperature < 0:
            raise InvalidRequest(
                f'invalid temperature: {self.temperature!r}')

    @property
    def prompt_text(self) -> str:
        """All message contents joined, used for script expectations"""
        return '\n'.join(m.content for m in self.messages)


class ChatResponse(typing.NamedTuple):
    text: typing.Optional[str]
    tool_call: typing.Optional[ToolCall]
    raw: typing.Any = None


class ProviderConfig(typing.NamedTuple):
    kind: str = 'mock'
    base_url: typing.Optional[str] = None
    model_id: str = 'mock'
    embedding_model_id: typing.Optional[str] = None
    script: typing.Optional[Path] = None
    timeout: int = DEFAULT_TIMEOUT
    temperature: float = 0.0
    api_key: typing.Optional[str] = None


class ChatProvider(object):
    """Base class for chat-completion providers"""

    model_id: str = ''

    def complete(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError()


class Embedder(object):
    """Base class for text embedders"""

    def embed(self,
              texts: typing.Sequence[str]
              ) -> typing.List[EmbeddingVector]:
        raise NotImplementedError()


def check_embed_input(texts: typing.Sequence[str]) -> None:
    if not texts:
        raise InvalidRequest('no texts to embed')
    for t in texts:
        if not t:
            raise InvalidRequest('empty text passed to embed()')


def parse_fenced_json(text: str) -> typing.Any:
    """
    Decode the JSON document in a model reply

    The first fenced block is used if present, otherwise the whole
    reply.  Raises ValueError if it is not valid JSON.
    """

    m = FENCED_JSON_RE.search(text)
    if m is not None:
        text = m.group(1)
    return json.loads(text.strip())


def parse_arguments(arguments: typing.Any,
                    raw: typing.Any
                    ) -> typing.Dict[str, typing.Any]:
    """
    Parse tool-call arguments into a dict.  Accepts both a JSON string
    and an already decoded object.
    """

    if isinstance(arguments, str):
        try:
            arguments = json.loads(arguments) if arguments.strip() else {}
        except json.JSONDecodeError as e:
            raise ProviderProtocolError(
                f'malformed tool-call arguments: {e}', raw=raw)
    if not isinstance(arguments, dict):
        raise ProviderProtocolError(
            f'tool-call arguments are not an object: {arguments!r}',
            raw=raw)
    return arguments


class ReplayProvider(ChatProvider):
    """
    Deterministic scripted chat provider

    The script is an ordered list of steps, each consumed by one
    complete() call.  A step may carry `expect_substring` that must
    occur in the incoming prompt, and exactly one of `respond_text`
    and `respond_tool_call` ({"name": ..., "arguments": ...}).
    Calls are serialized so that concurrent callers consume the script
    in a well-defined order.
    """

    model_id = 'mock'

    def __init__(self,
                 script: typing.Sequence[typing.Mapping[str, typing.Any]]
                 ) -> None:
        for i, step in enumerate(script):
            if ('respond_text' in step) == ('respond_tool_call' in step):
                raise ProviderError(
                    f'script step {i}: exactly one of respond_text '
                    f'and respond_tool_call is required')
        self.script = list(script)
        self.position = 0
        self.requests: typing.List[ChatRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: Path) -> 'ReplayProvider':
        with open(path, 'r') as f:
            return cls(json.load(f))

    @property
    def remaining(self) -> int:
        return len(self.script) - self.position

    def complete(self, request: ChatRequest) -> ChatResponse:
        request.check()
        with self._lock:
            if self.position >= len(self.script):
                raise ScriptExhausted(
                    f'replay script exhausted after {self.position} '
                    f'calls')
            step = self.script[self.position]
            index = self.position
            self.position += 1
            self.requests.append(request)

        expect = step.get('expect_substring')
        if expect is not None and expect not in request.prompt_text:
            raise ScriptMismatch(
                f'script step {index}: {expect!r} not found in prompt')

        if 'respond_text' in step:
            return ChatResponse(text=step['respond_text'],
                                tool_call=None,
                                raw=step)
        call = step['respond_tool_call']
        return ChatResponse(
            text=None,
            tool_call=ToolCall(name=call['name'],
                               arguments=parse_arguments(
                                   call.get('arguments', {}), raw=step),
                               id=call.get('id', f'call_{index}')),
            raw=step)


class HttpChatProvider(ChatProvider):
    """
    Client for a chat-completions-compatible HTTP endpoint

    Transport failures (connection errors, timeouts, 5xx and 429
    responses) are retried with exponential backoff.  Malformed
    responses raise ProviderProtocolError immediately.
    """

    def __init__(self,
                 base_url: str,
                 model_id: str,
                 api_key: typing.Optional[str] = None,
                 timeout: int = DEFAULT_TIMEOUT,
                 backoff: float = 1.0
                 ) -> None:
        self.base_url = base_url.rstrip('/')
        self.model_id = model_id
        self.api_key = api_key
        self.timeout = timeout
        self.backoff = backoff
        self.session = requests.Session()

    def _post(self,
              endpoint: str,
              payload: typing.Dict[str, typing.Any]
              ) -> typing.Any:
        """
        POST `payload` as JSON to `endpoint` and return decoded JSON
        response.  Retries transport errors up to RETRY_ATTEMPTS times.
        """

        headers = {}
        if self.api_key is not None:
            headers['Authorization'] = f'Bearer {self.api_key}'
        url = f'{self.base_url}/{endpoint}'

        last_error = ''
        for attempt in range(RETRY_ATTEMPTS):
            if attempt > 0:
                delay = self.backoff * 2 ** (attempt - 1)
                log.warning(f'{url}: {last_error}, retrying in '
                            f'{delay:.1f} s ({attempt}/'
                            f'{RETRY_ATTEMPTS - 1})')
                time.sleep(delay)
            try:
                ret = self.session.post(url,
                                        json=payload,
                                        headers=headers,
                                        timeout=self.timeout)
            except requests.RequestException as e:
                last_error = f'request failed: {e}'
                continue
            if ret.status_code >= 500 or ret.status_code == 429:
                last_error = f'HTTP {ret.status_code}'
                continue
            if not ret:
                raise ProviderError(
                    f'request failed, URL: {url}, '
                    f'status: {ret.status_code}, '
                    f'response: {ret.content!r}')
            try:
                return ret.json()
            except ValueError:
                raise ProviderProtocolError(
                    f'{url} returned invalid JSON', raw=ret.text)
        raise ProviderTransportError(
            f'{url}: {last_error} (after {RETRY_ATTEMPTS} attempts)')

    @staticmethod
    def message_to_json(message: ChatMessage
                        ) -> typing.Dict[str, typing.Any]:
        if message.tool_call is not None:
            return {
                'role': message.role,
                'content': message.content or None,
                'tool_calls': [{
                    'id': message.tool_call.id,
                    'type': 'function',
                    'function': {
                        'name': message.tool_call.name,
                        'arguments': json.dumps(
                            message.tool_call.arguments, sort_keys=True),
                    },
                }],
            }
        if message.role == 'tool':
            return {
                'role': 'tool',
                'tool_call_id': message.tool_call_id,
                'content': message.content,
            }
        return {'role': message.role, 'content': message.content}

    def complete(self, request: ChatRequest) -> ChatResponse:
        request.check()
        payload: typing.Dict[str, typing.Any] = {
            'model': request.model_id or self.model_id,
            'messages': [self.message_to_json(m) for m in request.messages],
            'temperature': request.temperature,
        }
        if request.tools:
            payload['tools'] = [{'type': 'function',
                                 'function': t.to_json()}
                                for t in request.tools]

        raw = self._post('chat/completions', payload)
        try:
            message = raw['choices'][0]['message']
        except (KeyError, IndexError, TypeError):
            raise ProviderProtocolError('response without choices', raw=raw)

        tool_calls = message.get('tool_calls') or []
        if tool_calls:
            try:
                function = tool_calls[0]['function']
                name = function['name']
            except (KeyError, TypeError):
                raise ProviderProtocolError('malformed tool call', raw=raw)
            return ChatResponse(
                text=None,
                tool_call=ToolCall(
                    name=name,
                    arguments=parse_arguments(function.get('arguments'),
                                              raw=raw),
                    id=tool_calls[0].get('id', '')),
                raw=raw)
        content = message.get('content')
        if not isinstance(content, str):
            raise ProviderProtocolError('response without content', raw=raw)
        return ChatResponse(text=content, tool_call=None, raw=raw)


class HttpEmbedder(Embedder):
    """Client for an embeddings-compatible HTTP endpoint"""

    def __init__(self,
                 provider: HttpChatProvider,
                 model_id: str
                 ) -> None:
        self.provider = provider
        self.model_id = model_id
        self.dimension: typing.Optional[int] = None

    def embed(self,
              texts: typing.Sequence[str]
              ) -> typing.List[EmbeddingVector]:
        check_embed_input(texts)
        raw = self.provider._post('embeddings', {
            'model': self.model_id,
            'input': list(texts),
        })
        try:
            data = sorted(raw['data'], key=lambda x: x['index'])
            vectors = [numpy.asarray(x['embedding'], dtype=float)
                       for x in data]
        except (KeyError, TypeError, ValueError):
            raise ProviderProtocolError('malformed embeddings response',
                                        raw=raw)
        if len(vectors) != len(texts):
            raise ProviderProtocolError(
                f'{len(vectors)} embeddings returned for {len(texts)} '
                f'texts', raw=raw)
        for v in vectors:
            if self.dimension is None:
                self.dimension = v.shape[0]
            if v.shape != (self.dimension,) or not numpy.isfinite(v).all():
                raise ProviderProtocolError(
                    'embedding of inconsistent dimension or non-finite',
                    raw=raw)
        return vectors


class HashingEmbedder(Embedder):
    """
    Deterministic bag-of-words embedder

    Lowercase alphanumeric tokens are hashed (MD5) into `dim` buckets;
    the count vector is L2-normalized.  Texts sharing many tokens get
    high cosine similarity.  Text without any token maps to the zero
    vector.
    """

    def __init__(self, dim: int = HASHING_DIM) -> None:
        self.dim = dim

    def bucket(self, token: str) -> int:
        return int(hashlib.md5(token.encode()).hexdigest(), 16) % self.dim

    def embed_one(self, text: str) -> EmbeddingVector:
        v = numpy.zeros(self.dim)
        for token in TOKEN_RE.findall(text.lower()):
            v[self.bucket(token)] += 1
        norm = numpy.linalg.norm(v)
        if norm > 0:
            v /= norm
        return v

    def embed(self,
              texts: typing.Sequence[str]
              ) -> typing.List[EmbeddingVector]:
        check_embed_input(texts)
        return [self.embed_one(t) for t in texts]


def cosine(a: typing.Union[EmbeddingVector, typing.Sequence[float]],
           b: typing.Union[EmbeddingVector, typing.Sequence[float]]
           ) -> float:
    """
    Return cosine similarity of `a` and `b`

    Raises UndefinedSimilarity if either vector is all-zero.
    """

    va = numpy.asarray(a, dtype=float)
    vb = numpy.asarray(b, dtype=float)
    if va.shape != vb.shape:
        raise ValueError(f'dimension mismatch: {va.shape} vs {vb.shape}')
    na = numpy.linalg.norm(va)
    nb = numpy.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise UndefinedSimilarity('cosine similarity of a zero vector')
    return float(numpy.clip(numpy.dot(va, vb) / (na * nb), -1.0, 1.0))


def entity_embedding_text(entity: Entity,
                          text_mode: str = 'name_description'
                          ) -> str:
    """Text embedded for `entity`, either the name or name + description"""
    if text_mode == 'name':
        return entity.name
    return f'{entity.name}: {entity.description}'


def embed_graph(graph: KnowledgeGraph,
                embedder: Embedder,
                text_mode: str = 'name_description'
                ) -> int:
    """
    Embed every entity of `graph` that does not carry an embedding yet

    Returns the number of entities embedded.
    """

    todo = [e for e in graph.entities.values() if e.embedding is None]
    if not todo:
        return 0
    vectors = embedder.embed([entity_embedding_text(e, text_mode)
                              for e in todo])
    for e, v in zip(todo, vectors):
        graph.update_entity(e._replace(
            embedding=[float(x) for x in v]))
    log.info(f'Embedded {len(todo)} entities')
    return len(todo)


def make_provider(config: ProviderConfig) -> ChatProvider:
    """Construct the chat provider described by `config`"""
    if config.kind == 'mock':
        if config.script is None:
            return ReplayProvider([])
        return ReplayProvider.from_file(config.script)
    elif config.kind == 'http':
        if not config.base_url:
            raise ProviderError('http provider requires a base URL')
        return HttpChatProvider(config.base_url,
                                config.model_id,
                                api_key=config.api_key,
                                timeout=config.timeout)
    raise ProviderError(f'unknown provider kind: {config.kind!r}')


def make_embedder(config: ProviderConfig,
                  provider: typing.Optional[ChatProvider] = None
                  ) -> Embedder:
    """
    Construct the embedder matching `config`.  For http providers,
    the chat provider's session is reused when `provider` is given.
    """

    if config.kind == 'http':
        if not isinstance(provider, HttpChatProvider):
            provider = make_provider(config)
        assert isinstance(provider, HttpChatProvider)
        return HttpEmbedder(provider,
                            config.embedding_model_id or config.model_id)
    return HashingEmbedder()
