# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Two-pass entity and relation extraction. """

import logging
import typing

from policykg.llm import (ChatMessage, ChatProvider, ChatRequest,
                          ProviderError, parse_fenced_json)
from policykg.model import (CORRESPONDS_TO, Chunk, Entity, InvalidLabel,
                            KnowledgeGraph, Relation, SchemaMode)
from policykg.prompts import PromptLibrary


SUMMARY_MAX_CHARS = 160

REPROMPT = ('Your previous reply could not be parsed: {error}\n'
            'Reply again with a single fenced JSON block only.')

log = logging.getLogger('policykg')


class ExtractionParseError(ValueError):
    def __init__(self,
                 message: str,
                 raw: str = ''
                 ) -> None:
        super().__init__(message)
        self.raw = raw


class ExtractorConfig(typing.NamedTuple):
    k_same: int = 30
    k_cross: int = 15


class ContextEntry(typing.NamedTuple):
    id: str
    name: str
    entity_type: str
    summary: str


class ExtractionContext(typing.NamedTuple):
    same_source_entities: typing.List[ContextEntry]
    cross_source_entities: typing.List[ContextEntry]
    open_type_vocabulary: typing.List[str] = []
    open_relation_vocabulary: typing.List[str] = []

    @property
    def ids(self) -> typing.Set[str]:
        return set(e.id for e in self.same_source_entities
                   + self.cross_source_entities)


class RawEntity(typing.NamedTuple):
    name: str
    entity_type: str
    description: str = ''
    article_ref: str = ''
    policy_quote: str = ''


class RawRelation(typing.NamedTuple):
    relation_type: str
    source_entity_id: str
    target_entity_id: str
    description: str = ''


class RawExtraction(typing.NamedTuple):
    entities: typing.List[RawEntity]
    relations: typing.List[RawRelation]


class Rejection(typing.NamedTuple):
    item: str
    rule: str
    message: str


class ChunkResult(typing.NamedTuple):
    chunk_id: str
    raw: RawExtraction
    entity_ids: typing.List[str]
    relation_ids: typing.List[str]
    rejected: typing.List[Rejection]
    failed: bool = False
    error: str = ''


class MergeRecord(typing.NamedTuple):
    kept_id: str
    merged_id: str
    name: str
    entity_type: str


class ExtractionReport(typing.NamedTuple):
    chunks: typing.List[ChunkResult]
    merges: typing.List[MergeRecord]

    @property
    def failed_chunks(self) -> typing.List[str]:
        return [c.chunk_id for c in self.chunks if c.failed]


def one_line(text: str, limit: int = SUMMARY_MAX_CHARS) -> str:
    line = ' '.join(text.split())
    if len(line) > limit:
        line = line[:limit - 3].rstrip() + '...'
    return line


def context_entry(entity: Entity) -> ContextEntry:
    return ContextEntry(entity.id, entity.name, entity.entity_type,
                        one_line(entity.description))


def build_context(graph: KnowledgeGraph,
                  current_source: str,
                  k_same: int = 30,
                  k_cross: int = 15
                  ) -> ExtractionContext:
    """
    Build the incremental context for extracting from `current_source`

    Same-source entries are the `k_same` most recently added entities
    of the current source, oldest first.  Cross-source entries are
    the `k_cross` entities of other sources with the highest degree,
    ties broken by id.
    """

    same = [e for e in graph.entities.values()
            if e.source_id == current_source]
    same = same[len(same) - k_same:] if k_same > 0 else []
    foreign = sorted((e for e in graph.entities.values()
                      if e.source_id != current_source),
                     key=lambda e: (-graph.degree(e.id), e.id))[:k_cross]

    type_vocab: typing.List[str] = []
    rel_vocab: typing.List[str] = []
    if graph.schema.mode == SchemaMode.OPEN:
        type_vocab = sorted(graph.schema.entity_types)
        rel_vocab = sorted(graph.schema.relation_types - {CORRESPONDS_TO})
    return ExtractionContext(
        same_source_entities=[context_entry(e) for e in same],
        cross_source_entities=[context_entry(e) for e in foreign],
        open_type_vocabulary=type_vocab,
        open_relation_vocabulary=rel_vocab)


def _items(text: str, key: str) -> typing.List[typing.Dict[str, typing.Any]]:
    try:
        data = parse_fenced_json(text)
    except ValueError as e:
        raise ExtractionParseError(f'invalid JSON: {e}', raw=text)
    if not isinstance(data, dict) or not isinstance(data.get(key), list):
        raise ExtractionParseError(f'expected an object with "{key}" list',
                                   raw=text)
    for item in data[key]:
        if not isinstance(item, dict):
            raise ExtractionParseError(f'"{key}" item is not an object',
                                       raw=text)
    return data[key]


def _field(item: typing.Mapping[str, typing.Any],
           key: str,
           raw: str,
           required: bool = False
           ) -> str:
    value = item.get(key, '')
    if value is None:
        value = ''
    if not isinstance(value, str):
        raise ExtractionParseError(f'"{key}" is not a string', raw=raw)
    if required and not value.strip():
        raise ExtractionParseError(f'missing "{key}"', raw=raw)
    return value.strip()


def parse_entities(text: str) -> typing.List[RawEntity]:
    """Parse a pass-1 reply.  Raises ExtractionParseError."""
    return [RawEntity(name=_field(x, 'name', text, required=True),
                      entity_type=_field(x, 'entity_type', text,
                                         required=True),
                      description=_field(x, 'description', text),
                      article_ref=_field(x, 'article_ref', text),
                      policy_quote=_field(x, 'policy_quote', text))
            for x in _items(text, 'entities')]


def parse_relations(text: str) -> typing.List[RawRelation]:
    """Parse a pass-2 reply.  Raises ExtractionParseError."""
    return [RawRelation(
                relation_type=_field(x, 'relation_type', text,
                                     required=True),
                source_entity_id=_field(x, 'source_entity_id', text,
                                        required=True),
                target_entity_id=_field(x, 'target_entity_id', text,
                                        required=True),
                description=_field(x, 'description', text))
            for x in _items(text, 'relations')]


T = typing.TypeVar('T')


def ask_json(provider: ChatProvider,
             prompt: str,
             parse: typing.Callable[[str], T]
             ) -> T:
    """
    Send `prompt` and parse the reply with `parse`.  On a parse error,
    reprompt once with the error appended; a second failure raises
    ExtractionParseError.
    """

    messages = [ChatMessage('user', prompt)]
    resp = provider.complete(ChatRequest(messages=messages,
                                         model_id=provider.model_id))
    text = resp.text or ''
    try:
        return parse(text)
    except ExtractionParseError as e:
        log.warning(f'Unparseable model output ({e}), reprompting')
        messages += [ChatMessage('assistant', text),
                     ChatMessage('user', REPROMPT.format(error=e))]
    resp = provider.complete(ChatRequest(messages=messages,
                                         model_id=provider.model_id))
    return parse(resp.text or '')


def extract_chunk(chunk: Chunk,
                  graph: KnowledgeGraph,
                  context: ExtractionContext,
                  provider: ChatProvider,
                  prompts: PromptLibrary,
                  source_title: str = ''
                  ) -> ChunkResult:
    """
    Extract entities and relations from `chunk` into `graph`

    Pass 1 asks for entities, which are validated against the schema
    and inserted with fresh ids.  Pass 2 asks for relations between
    the new ids and the context ids.  Invalid items are rejected
    and logged, never inserted.  If pass 1 yields no entities, pass 2
    is skipped.  A chunk whose output cannot be parsed after one
    reprompt is reported as failed; entities from a successful pass 1
    are kept.
    """

    schema = graph.schema
    common = {
        'schema_mode': schema.mode.value,
        'entity_types': sorted(schema.entity_types),
        'direction_rules': schema.direction_rules,
        'open_vocabulary': context.open_type_vocabulary,
        'open_relation_vocabulary': context.open_relation_vocabulary,
        'same_source': context.same_source_entities,
        'cross_source': context.cross_source_entities,
        'source_id': chunk.source_id,
        'source_title': source_title or chunk.source_id,
        'chunk_id': chunk.id,
        'chunk_text': chunk.text,
    }
    rejected: typing.List[Rejection] = []
    entity_ids: typing.List[str] = []
    relation_ids: typing.List[str] = []

    def reject(item: str, rule: str, message: str) -> None:
        log.warning(f'{chunk.id}: rejected {item}: {message}')
        rejected.append(Rejection(item, rule, message))

    try:
        raw_entities = ask_json(provider,
                                prompts.render('extract_entities', **common),
                                parse_entities)
    except (ExtractionParseError, ProviderError) as e:
        log.error(f'{chunk.id}: entity extraction failed: {e}')
        return ChunkResult(chunk.id, RawExtraction([], []), [], [], [],
                           failed=True, error=str(e))

    new_entities = []
    for raw in raw_entities:
        try:
            etype = schema.canonical_entity_type(raw.entity_type)
        except InvalidLabel as e:
            reject(raw.name, 'invalid-label', str(e))
            continue
        if (schema.mode == SchemaMode.CLOSED
                and etype not in schema.entity_types):
            reject(raw.name, 'unknown-entity-type',
                   f'{etype} is not part of the closed schema')
            continue
        entity = graph.add_entity(Entity(
            id=graph.next_entity_id(chunk.source_id),
            name=raw.name,
            entity_type=etype,
            description=raw.description,
            article_ref=raw.article_ref,
            policy_quote=raw.policy_quote,
            source_id=chunk.source_id,
            source_chunk_id=chunk.id))
        entity_ids.append(entity.id)
        new_entities.append(entity)

    if not new_entities:
        log.info(f'{chunk.id}: no entities extracted')
        return ChunkResult(chunk.id, RawExtraction(raw_entities, []),
                           entity_ids, relation_ids, rejected)

    try:
        raw_relations = ask_json(
            provider,
            prompts.render('extract_relations', entities=new_entities,
                           **common),
            parse_relations)
    except (ExtractionParseError, ProviderError) as e:
        log.error(f'{chunk.id}: relation extraction failed: {e}')
        return ChunkResult(chunk.id, RawExtraction(raw_entities, []),
                           entity_ids, relation_ids, rejected,
                           failed=True, error=str(e))

    known = set(entity_ids) | context.ids
    for raw_rel in raw_relations:
        desc = (f'{raw_rel.relation_type}: {raw_rel.source_entity_id} -> '
                f'{raw_rel.target_entity_id}')
        try:
            rtype = schema.canonical_relation_type(raw_rel.relation_type)
        except InvalidLabel as e:
            reject(desc, 'invalid-label', str(e))
            continue
        if rtype == CORRESPONDS_TO:
            reject(desc, 'reserved-relation-type',
                   f'{CORRESPONDS_TO} is added by cross-policy linking only')
            continue
        unknown = [x for x in (raw_rel.source_entity_id,
                               raw_rel.target_entity_id)
                   if x not in known or x not in graph.entities]
        if unknown:
            reject(desc, 'unknown-endpoint',
                   f'unknown entity id(s): {", ".join(unknown)}')
            continue
        if graph.find_relation(rtype, raw_rel.source_entity_id,
                               raw_rel.target_entity_id) is not None:
            reject(desc, 'duplicate', 'relation already exists')
            continue
        rel = Relation(id='',
                       relation_type=rtype,
                       source_entity_id=raw_rel.source_entity_id,
                       target_entity_id=raw_rel.target_entity_id,
                       description=raw_rel.description)
        violation = graph.check_relation(rel)
        if violation is not None:
            reject(desc, violation.rule, violation.message)
            continue
        rel = rel._replace(id=graph.next_relation_id())
        graph.add_relation(rel, check=False)
        relation_ids.append(rel.id)

    log.info(f'{chunk.id}: {len(entity_ids)} entities, '
             f'{len(relation_ids)} relations, {len(rejected)} rejected')
    return ChunkResult(chunk.id, RawExtraction(raw_entities, raw_relations),
                       entity_ids, relation_ids, rejected)


def dedup_key(entity: Entity) -> typing.Tuple[str, str, str]:
    return (' '.join(entity.name.casefold().split()),
            entity.entity_type,
            entity.source_id)


def merge_entities(graph: KnowledgeGraph,
                   kept_id: str,
                   merged_id: str
                   ) -> None:
    """
    Merge entity `merged_id` into `kept_id`

    Relations are re-pointed to the kept entity; relations that turn
    into self-loops or exact duplicates are dropped.  Differing
    descriptions are concatenated.
    """

    for rid in graph.incident_relations(merged_id):
        rel = graph.repoint_relation(rid, merged_id, kept_id)
        if rel.source_entity_id == rel.target_entity_id:
            graph.remove_relation(rid)
            continue
        for other in graph.out_index.get(rel.source_entity_id, []):
            o = graph.relations[other]
            if (other != rid and o.relation_type == rel.relation_type
                    and o.target_entity_id == rel.target_entity_id):
                graph.remove_relation(rid)
                break

    kept = graph.entities[kept_id]
    merged = graph.remove_entity(merged_id)
    description = kept.description
    if (merged.description
            and merged.description not in description.split('\n')):
        description = (f'{description}\n{merged.description}'
                       if description else merged.description)
    graph.update_entity(kept._replace(
        description=description,
        article_ref=kept.article_ref or merged.article_ref,
        policy_quote=kept.policy_quote or merged.policy_quote,
        embedding=(kept.embedding if description == kept.description
                   else None)))


def dedup_entities(graph: KnowledgeGraph) -> typing.List[MergeRecord]:
    """
    Merge entities sharing name, type and source

    Names are compared case-folded with whitespace collapsed.  Every
    group is merged into its earliest entity.  Returns one record
    per merged entity.
    """

    first: typing.Dict[typing.Tuple[str, str, str], str] = {}
    merges = []
    for eid in list(graph.entities):
        entity = graph.entities[eid]
        key = dedup_key(entity)
        kept_id = first.setdefault(key, eid)
        if kept_id == eid:
            continue
        merge_entities(graph, kept_id, eid)
        log.info(f'Merged {eid} into {kept_id} ({entity.name!r})')
        merges.append(MergeRecord(kept_id, eid, entity.name,
                                  entity.entity_type))
    return merges


def run_extraction(chunks: typing.Iterable[Chunk],
                   graph: KnowledgeGraph,
                   provider: ChatProvider,
                   prompts: PromptLibrary,
                   config: ExtractorConfig = ExtractorConfig(),
                   titles: typing.Mapping[str, str] = {}
                   ) -> ExtractionReport:
    """
    Extract all `chunks` into `graph` and deduplicate afterwards

    Chunks are processed sequentially in the order given; the context
    is rebuilt before every chunk.
    """

    results = []
    for chunk in chunks:
        context = build_context(graph, chunk.source_id,
                                k_same=config.k_same,
                                k_cross=config.k_cross)
        results.append(extract_chunk(chunk, graph, context, provider,
                                     prompts,
                                     source_title=titles.get(
                                         chunk.source_id, '')))
    merges = dedup_entities(graph)
    failed = sum(1 for r in results if r.failed)
    log.info(f'Extraction done: {len(graph.entities)} entities, '
             f'{len(graph.relations)} relations, {len(merges)} merges, '
             f'{failed} failed chunks')
    return ExtractionReport(results, merges)
