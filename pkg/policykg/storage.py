# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Persistence of graphs, chunk stores and evaluation results. """

import contextlib
import fcntl
import json
import logging
import typing

from pathlib import Path

from snakeoil.fileutils import AtomicWriteFile

from policykg.evalkit import (EvalTable, ScoreRecord, diagnostics_summary,
                              format_table)
from policykg.model import (Chunk, GraphError, KnowledgeGraph,
                            OntologySchema, PolicySource, Violation,
                            chunk_from_json, chunk_to_json, entity_from_json,
                            entity_to_json, relation_from_json,
                            relation_to_json, verify_graph)


FORMAT_VERSION = 1
CHUNK_STORE_SUFFIX = '.chunks.json'
POLICY_GLOB = '*.txt'

log = logging.getLogger('policykg')


class StorageError(Exception):
    pass


class SchemaVersionMismatch(StorageError):
    pass


class GraphVerificationFailed(StorageError):
    def __init__(self,
                 message: str,
                 violations: typing.List[Violation]
                 ) -> None:
        super().__init__(message)
        self.violations = violations


def dump_json(data: typing.Any) -> str:
    """Canonical serialization: sorted keys, 2-space indent, final newline"""
    return json.dumps(data, indent=2, sort_keys=True) + '\n'


def write_json(path: Path, data: typing.Any) -> None:
    with AtomicWriteFile(path) as f:
        f.write(dump_json(data))


def read_json(path: Path) -> typing.Any:
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise StorageError(f'{path}: invalid JSON: {e}')


def check_version(path: Path, data: typing.Any) -> None:
    if not isinstance(data, dict):
        raise StorageError(f'{path}: not a JSON object')
    version = data.get('version')
    if version != FORMAT_VERSION:
        raise SchemaVersionMismatch(
            f'{path}: format version {version!r}, expected '
            f'{FORMAT_VERSION}')


@contextlib.contextmanager
def locked_output(path: Path) -> typing.Iterator[None]:
    """Hold an exclusive lock on `path` (via a .lock sidecar file)"""
    lock_path = path.with_name(path.name + '.lock')
    with open(lock_path, 'w') as lock_file:
        fcntl.flock(lock_file.fileno(), fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(lock_file.fileno(), fcntl.LOCK_UN)


def graph_to_json(graph: KnowledgeGraph) -> typing.Dict[str, typing.Any]:
    return {
        'version': FORMAT_VERSION,
        'schema': graph.schema.to_json(),
        'entities': [entity_to_json(graph.entities[k])
                     for k in sorted(graph.entities)],
        'relations': [relation_to_json(graph.relations[k])
                      for k in sorted(graph.relations)],
    }


def graph_from_json(data: typing.Mapping[str, typing.Any]
                    ) -> KnowledgeGraph:
    """
    Build a graph from its JSON document without validating relations.
    Use load_graph() to get a verified graph.
    """

    graph = KnowledgeGraph(OntologySchema.from_json(data['schema']))
    for e in data['entities']:
        graph.add_entity(entity_from_json(e))
    for r in data['relations']:
        graph.add_relation(relation_from_json(r), check=False)
    return graph


def save_graph(graph: KnowledgeGraph, path: Path) -> None:
    """
    Write `graph` to `path`.  Raises GraphVerificationFailed
    if the graph does not verify.
    """

    violations = verify_graph(graph)
    if violations:
        raise GraphVerificationFailed(
            f'refusing to save a graph with {len(violations)} '
            f'violations', violations)
    with locked_output(path):
        write_json(path, graph_to_json(graph))
    log.info(f'Graph saved to {path}: {len(graph.entities)} entities, '
             f'{len(graph.relations)} relations')


def load_graph(path: Path, verify: bool = True) -> KnowledgeGraph:
    """
    Load and verify a graph document

    Raises SchemaVersionMismatch for documents of another format
    version and GraphVerificationFailed if the loaded graph violates
    its schema or invariants (unless `verify` is False).
    """

    data = read_json(path)
    check_version(path, data)
    try:
        graph = graph_from_json(data)
    except (KeyError, TypeError, ValueError, GraphError) as e:
        raise StorageError(f'{path}: malformed graph document: {e!r}')
    violations = verify_graph(graph) if verify else []
    if violations:
        for v in violations:
            log.error(f'{path}: {v.subject_id}: {v.rule}: {v.message}')
        raise GraphVerificationFailed(
            f'{path}: graph fails verification ({len(violations)} '
            f'violations)', violations)
    return graph


def chunk_store_path(graph_path: Path) -> Path:
    """Chunk store accompanying a graph file: <stem>.chunks.json"""
    name = graph_path.name
    if name.endswith('.json'):
        name = name[:-len('.json')]
    return graph_path.with_name(name + CHUNK_STORE_SUFFIX)


def save_chunks(chunks: typing.Iterable[Chunk],
                path: Path,
                titles: typing.Mapping[str, str] = {}
                ) -> None:
    """Write a chunk store, with the titles of its sources if known"""
    with locked_output(path):
        write_json(path, {
            'version': FORMAT_VERSION,
            'chunks': {c.id: chunk_to_json(c) for c in chunks},
            'titles': dict(titles),
        })


def load_chunk_store(path: Path
                     ) -> typing.Tuple[typing.Dict[str, Chunk],
                                       typing.Dict[str, str]]:
    """Load a chunk store, returning chunks by id and source titles"""
    data = read_json(path)
    check_version(path, data)
    try:
        chunks = {k: chunk_from_json(v) for k, v in data['chunks'].items()}
        titles = {str(k): str(v)
                  for k, v in data.get('titles', {}).items()}
    except (KeyError, TypeError, AttributeError, GraphError) as e:
        raise StorageError(f'{path}: malformed chunk store: {e!r}')
    for k, c in chunks.items():
        if k != c.id:
            raise StorageError(f'{path}: chunk keyed {k} has id {c.id}')
    return chunks, titles


def load_chunks(path: Path) -> typing.Dict[str, Chunk]:
    """Load a chunk store, returning a dict keyed by chunk id"""
    return load_chunk_store(path)[0]


def load_sources(paths: typing.Iterable[Path]
                 ) -> typing.List[PolicySource]:
    """
    Load policy documents from text files and directories (*.txt)

    The file stem becomes the source id, the first non-empty line
    the title.  Sources are returned sorted by id.
    """

    files: typing.List[Path] = []
    for p in paths:
        if p.is_dir():
            files.extend(sorted(p.glob(POLICY_GLOB)))
        else:
            files.append(p)

    sources: typing.Dict[str, PolicySource] = {}
    for f in files:
        with open(f, 'r') as fh:
            text = fh.read()
        if not text.strip():
            raise StorageError(f'{f}: empty policy document')
        title = next(line.strip() for line in text.splitlines()
                     if line.strip())
        if f.stem in sources:
            raise StorageError(f'duplicate source id: {f.stem}')
        sources[f.stem] = PolicySource(f.stem, title, text)
    return [sources[k] for k in sorted(sources)]


def save_results(records: typing.Sequence[ScoreRecord],
                 table: EvalTable,
                 path: Path
                 ) -> None:
    """Write per-record scores, the aggregate table and diagnostics"""
    with locked_output(path):
        write_json(path, {
            'version': FORMAT_VERSION,
            'records': [r.to_json() for r in records],
            'aggregate': {
                cond: {
                    'tasks': {t: cell._asdict() for t, cell in row.items()},
                    'overall': table.overall[cond]._asdict(),
                } for cond, row in table.cells.items()
            },
            'diagnostics': diagnostics_summary(records),
            'table': list(format_table(table)),
        })
    log.info(f'Results written to {path}')
