# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Graph model, ontology schemas and validation. """

import collections
import enum
import json
import re
import typing

from pathlib import Path


DATA_DIR = Path(__file__).parent / 'data'
DEFAULT_CLOSED_SCHEMA = DATA_DIR / 'schema_airo.json'

CORRESPONDS_TO = 'CORRESPONDS_TO'

NON_ALNUM_RE = re.compile(r'[^a-z0-9]+')
OPEN_LABEL_RE = re.compile(r'^[a-z0-9]+(?:_[a-z0-9]+)*$')
ENTITY_ID_RE = re.compile(r'^(?P<source>.+)_e(?P<ordinal>[0-9]+)$')
RELATION_ID_RE = re.compile(r'^r(?P<ordinal>[0-9]+)$')


class InvalidLabel(ValueError):
    pass


class GraphError(Exception):
    pass


class SchemaMode(enum.Enum):
    CLOSED = 'closed'
    OPEN = 'open'


class PolicySource(typing.NamedTuple):
    id: str
    title: str
    document_text: str


class Chunk(typing.NamedTuple):
    id: str
    source_id: str
    start_offset: int
    end_offset: int
    text: str
    boundary_reason: str = ''


class Entity(typing.NamedTuple):
    id: str
    name: str
    entity_type: str
    description: str = ''
    article_ref: str = ''
    policy_quote: str = ''
    source_id: str = ''
    source_chunk_id: str = ''
    embedding: typing.Optional[typing.List[float]] = None


class Relation(typing.NamedTuple):
    id: str
    relation_type: str
    source_entity_id: str
    target_entity_id: str
    description: str = ''
    similarity: typing.Optional[float] = None


class DirectionRule(typing.NamedTuple):
    relation_type: str
    source_type: str
    target_type: str


class Violation(typing.NamedTuple):
    subject_id: str
    rule: str
    message: str


def normalize_type_label(raw: str) -> str:
    """
    Normalize a type label to lowercase_with_underscores form

    Every maximal run of characters other than ASCII letters and digits
    is replaced by a single underscore, and leading/trailing underscores
    are stripped.  The operation is idempotent.  Raises InvalidLabel
    if nothing is left.
    """

    label = NON_ALNUM_RE.sub('_', raw.strip().lower()).strip('_')
    if not label:
        raise InvalidLabel(f'invalid type label: {raw!r}')
    return label


class OntologySchema(object):
    """
    Entity and relation vocabulary of a graph

    A CLOSED schema has a fixed vocabulary and a table of source->target
    direction rules.  An OPEN schema starts (nearly) empty and grows
    as labels are observed; it never shrinks.  CORRESPONDS_TO is part
    of both.
    """

    mode: SchemaMode
    direction_rules: typing.Tuple[DirectionRule, ...]

    def __init__(self,
                 mode: SchemaMode,
                 entity_types: typing.Iterable[str] = (),
                 relation_types: typing.Iterable[str] = (),
                 direction_rules: typing.Iterable[DirectionRule] = ()
                 ) -> None:
        self.mode = mode
        self.direction_rules = tuple(sorted(DirectionRule(*r)
                                            for r in direction_rules))
        self._rule_set = frozenset(self.direction_rules)
        rel_types = set(relation_types)
        rel_types.update(r.relation_type for r in self.direction_rules)
        rel_types.add(CORRESPONDS_TO)
        self._entity_types: typing.AbstractSet[str]
        self._relation_types: typing.AbstractSet[str]
        if mode == SchemaMode.CLOSED:
            self._entity_types = frozenset(entity_types)
            self._relation_types = frozenset(rel_types)
        else:
            self._entity_types = set(entity_types)
            self._relation_types = rel_types

    @classmethod
    def closed(cls,
               path: typing.Optional[Path] = None
               ) -> 'OntologySchema':
        """
        Load a CLOSED schema from a schema file (the packaged one
        if `path` is None).
        """

        with open(path or DEFAULT_CLOSED_SCHEMA, 'r') as f:
            data = json.load(f)
        return cls(SchemaMode.CLOSED,
                   entity_types=data['entity_types'],
                   direction_rules=(DirectionRule(*r)
                                    for r in data['direction_rules']))

    @classmethod
    def open(cls) -> 'OntologySchema':
        return cls(SchemaMode.OPEN)

    @classmethod
    def for_mode(cls,
                 mode: SchemaMode,
                 path: typing.Optional[Path] = None
                 ) -> 'OntologySchema':
        if mode == SchemaMode.CLOSED:
            return cls.closed(path)
        return cls.open()

    @property
    def entity_types(self) -> typing.FrozenSet[str]:
        return frozenset(self._entity_types)

    @property
    def relation_types(self) -> typing.FrozenSet[str]:
        return frozenset(self._relation_types)

    def canonical_entity_type(self, raw: str) -> str:
        """Return the stored form of entity type `raw`"""
        label = normalize_type_label(raw)
        if self.mode == SchemaMode.CLOSED:
            return label.upper()
        return label

    def canonical_relation_type(self, raw: str) -> str:
        """Return the stored form of relation type `raw`"""
        label = normalize_type_label(raw)
        if label.upper() == CORRESPONDS_TO:
            return CORRESPONDS_TO
        if self.mode == SchemaMode.CLOSED:
            return label.upper()
        return label

    def observe_entity_type(self, label: str) -> bool:
        """
        Record entity type `label`.  Returns True if the label is part
        of the vocabulary afterwards (always, for OPEN schemas).
        """
        if label in self._entity_types:
            return True
        if self.mode == SchemaMode.CLOSED:
            return False
        assert isinstance(self._entity_types, set)
        self._entity_types.add(label)
        return True

    def observe_relation_type(self, label: str) -> bool:
        """Record relation type `label`, see observe_entity_type()"""
        if label in self._relation_types:
            return True
        if self.mode == SchemaMode.CLOSED:
            return False
        assert isinstance(self._relation_types, set)
        self._relation_types.add(label)
        return True

    def has_rule(self, rule: DirectionRule) -> bool:
        return rule in self._rule_set

    def to_json(self) -> typing.Dict[str, typing.Any]:
        return {
            'mode': self.mode.value,
            'entity_types': sorted(self._entity_types),
            'relation_types': sorted(self._relation_types),
            'direction_rules': [list(r) for r in self.direction_rules],
        }

    @classmethod
    def from_json(cls,
                  data: typing.Mapping[str, typing.Any]
                  ) -> 'OntologySchema':
        return cls(SchemaMode(data['mode']),
                   entity_types=data.get('entity_types', []),
                   relation_types=data.get('relation_types', []),
                   direction_rules=(DirectionRule(*r) for r
                                    in data.get('direction_rules', [])))


def validate_relation(schema: OntologySchema,
                      rel_type: str,
                      src_type: str,
                      dst_type: str
                      ) -> bool:
    """
    Check a (relation type, source type, target type) triple

    Under a CLOSED schema, the triple must match one of the direction
    rules exactly.  OPEN schemas accept any typed pair.  CORRESPONDS_TO
    is accepted between any types in both modes.  Unknown relation
    types are reported as False, not raised.
    """

    if not (rel_type and src_type and dst_type):
        raise InvalidLabel('empty label passed to validate_relation()')
    if rel_type == CORRESPONDS_TO:
        return True
    if schema.mode == SchemaMode.OPEN:
        return True
    return schema.has_rule(DirectionRule(rel_type, src_type, dst_type))


class KnowledgeGraph(object):
    """
    Typed graph of entities and relations

    Relations are indexed both ways: `out_index` maps an entity id
    to ids of relations starting at it, `in_index` to ids of relations
    ending at it.  Mutating methods keep the indices and type counts
    consistent.  The graph has a single writer during the build; after
    that it is treated as read-only.
    """

    schema: OntologySchema
    entities: typing.Dict[str, Entity]
    relations: typing.Dict[str, Relation]
    out_index: typing.Dict[str, typing.List[str]]
    in_index: typing.Dict[str, typing.List[str]]

    def __init__(self,
                 schema: OntologySchema
                 ) -> None:
        self.schema = schema
        self.entities = {}
        self.relations = {}
        self.out_index = {}
        self.in_index = {}
        self.entity_type_counts: typing.Counter[str] = collections.Counter()
        self.relation_type_counts: typing.Counter[str] = (
            collections.Counter())
        self._entity_ordinals: typing.Dict[str, int] = {}
        self._relation_ordinal = 0

    @property
    def type_vocabulary(self) -> typing.Dict[str, typing.Dict[str, int]]:
        """Observed entity and relation type counts"""
        return {
            'entity_types': dict(sorted(self.entity_type_counts.items())),
            'relation_types': dict(
                sorted(self.relation_type_counts.items())),
        }

    @property
    def sources(self) -> typing.List[str]:
        return sorted(set(e.source_id for e in self.entities.values()))

    def next_entity_id(self, source_id: str) -> str:
        """Issue the next deterministic entity id for `source_id`"""
        n = self._entity_ordinals.get(source_id, 0) + 1
        self._entity_ordinals[source_id] = n
        return f'{source_id}_e{n:04d}'

    def next_relation_id(self) -> str:
        self._relation_ordinal += 1
        return f'r{self._relation_ordinal:05d}'

    def _note_ids(self,
                  entity: typing.Optional[Entity] = None,
                  relation: typing.Optional[Relation] = None
                  ) -> None:
        # keep id counters ahead of ids inserted from outside
        if entity is not None:
            m = ENTITY_ID_RE.match(entity.id)
            if m is not None and m.group('source') == entity.source_id:
                n = int(m.group('ordinal'))
                if n > self._entity_ordinals.get(entity.source_id, 0):
                    self._entity_ordinals[entity.source_id] = n
        if relation is not None:
            m = RELATION_ID_RE.match(relation.id)
            if m is not None:
                self._relation_ordinal = max(self._relation_ordinal,
                                             int(m.group('ordinal')))

    def add_entity(self, entity: Entity) -> Entity:
        if entity.id in self.entities:
            raise GraphError(f'duplicate entity id: {entity.id}')
        self.entities[entity.id] = entity
        self.entity_type_counts[entity.entity_type] += 1
        self.schema.observe_entity_type(entity.entity_type)
        self._note_ids(entity=entity)
        return entity

    def update_entity(self, entity: Entity) -> None:
        """Replace the stored entity with the same id"""
        old = self.entities.get(entity.id)
        if old is None:
            raise GraphError(f'unknown entity id: {entity.id}')
        if old.entity_type != entity.entity_type:
            self.entity_type_counts[old.entity_type] -= 1
            if self.entity_type_counts[old.entity_type] <= 0:
                del self.entity_type_counts[old.entity_type]
            self.entity_type_counts[entity.entity_type] += 1
            self.schema.observe_entity_type(entity.entity_type)
        self.entities[entity.id] = entity

    def remove_entity(self, entity_id: str) -> Entity:
        """
        Remove an entity.  The entity must not have any incident
        relations left.
        """
        if self.incident_relations(entity_id):
            raise GraphError(
                f'entity {entity_id} still has incident relations')
        entity = self.entities.pop(entity_id)
        self.entity_type_counts[entity.entity_type] -= 1
        if self.entity_type_counts[entity.entity_type] <= 0:
            del self.entity_type_counts[entity.entity_type]
        self.out_index.pop(entity_id, None)
        self.in_index.pop(entity_id, None)
        return entity

    def check_relation(self, rel: Relation) -> typing.Optional[Violation]:
        """
        Check `rel` against the graph and the schema.  Returns
        the violation found, or None if the relation is valid.
        """

        src = self.entities.get(rel.source_entity_id)
        dst = self.entities.get(rel.target_entity_id)
        if src is None or dst is None:
            missing = [x for x, e in ((rel.source_entity_id, src),
                                      (rel.target_entity_id, dst))
                       if e is None]
            return Violation(rel.id, 'dangling-endpoint',
                             f'unknown endpoint(s): {", ".join(missing)}')
        if src.id == dst.id:
            return Violation(rel.id, 'self-loop',
                             f'relation connects {src.id} to itself')
        if rel.similarity is not None:
            if (rel.relation_type != CORRESPONDS_TO
                    or not 0.0 <= rel.similarity <= 1.0):
                return Violation(rel.id, 'similarity',
                                 f'invalid similarity {rel.similarity} '
                                 f'on {rel.relation_type}')
        if rel.relation_type == CORRESPONDS_TO:
            if src.source_id == dst.source_id:
                return Violation(rel.id, 'same-source-correspondence',
                                 f'{src.id} and {dst.id} both come from '
                                 f'{src.source_id}')
            return None
        if self.schema.mode == SchemaMode.CLOSED:
            if rel.relation_type not in self.schema.relation_types:
                return Violation(rel.id, 'unknown-relation-type',
                                 f'{rel.relation_type} is not part '
                                 f'of the closed schema')
            if not validate_relation(self.schema, rel.relation_type,
                                     src.entity_type, dst.entity_type):
                return Violation(rel.id, 'direction-rule',
                                 f'{rel.relation_type}: {src.entity_type}'
                                 f' -> {dst.entity_type} does not match '
                                 f'any direction rule')
        elif not OPEN_LABEL_RE.match(rel.relation_type):
            return Violation(rel.id, 'relation-type-form',
                             f'{rel.relation_type!r} is not in '
                             f'lowercase_with_underscores form')
        return None

    def add_relation(self,
                     rel: Relation,
                     check: bool = True
                     ) -> typing.Optional[Violation]:
        """
        Add relation `rel` to the graph

        If `check` is True, the relation is validated first and not
        inserted if it is invalid; the violation is returned instead.
        Returns None when the relation was added.
        """

        if rel.id in self.relations:
            raise GraphError(f'duplicate relation id: {rel.id}')
        if check:
            violation = self.check_relation(rel)
            if violation is not None:
                return violation
        self.relations[rel.id] = rel
        self.out_index.setdefault(rel.source_entity_id, []).append(rel.id)
        self.in_index.setdefault(rel.target_entity_id, []).append(rel.id)
        self.relation_type_counts[rel.relation_type] += 1
        self.schema.observe_relation_type(rel.relation_type)
        self._note_ids(relation=rel)
        return None

    def remove_relation(self, relation_id: str) -> Relation:
        rel = self.relations.pop(relation_id)
        self.out_index[rel.source_entity_id].remove(relation_id)
        self.in_index[rel.target_entity_id].remove(relation_id)
        self.relation_type_counts[rel.relation_type] -= 1
        if self.relation_type_counts[rel.relation_type] <= 0:
            del self.relation_type_counts[rel.relation_type]
        return rel

    def repoint_relation(self,
                         relation_id: str,
                         old_entity_id: str,
                         new_entity_id: str
                         ) -> Relation:
        """Move every endpoint of a relation at `old_entity_id`"""
        rel = self.relations[relation_id]
        new = rel
        if rel.source_entity_id == old_entity_id:
            self.out_index[old_entity_id].remove(relation_id)
            self.out_index.setdefault(new_entity_id, []).append(relation_id)
            new = new._replace(source_entity_id=new_entity_id)
        if rel.target_entity_id == old_entity_id:
            self.in_index[old_entity_id].remove(relation_id)
            self.in_index.setdefault(new_entity_id, []).append(relation_id)
            new = new._replace(target_entity_id=new_entity_id)
        self.relations[relation_id] = new
        return new

    def incident_relations(self, entity_id: str) -> typing.List[str]:
        """Return ids of relations touching `entity_id`, sorted"""
        return sorted(self.out_index.get(entity_id, [])
                      + self.in_index.get(entity_id, []))

    def degree(self, entity_id: str) -> int:
        return (len(self.out_index.get(entity_id, []))
                + len(self.in_index.get(entity_id, [])))

    def find_relation(self,
                      relation_type: str,
                      source_entity_id: str,
                      target_entity_id: str
                      ) -> typing.Optional[str]:
        for rid in self.out_index.get(source_entity_id, []):
            rel = self.relations[rid]
            if (rel.relation_type == relation_type
                    and rel.target_entity_id == target_entity_id):
                return rid
        return None


def verify_graph(graph: KnowledgeGraph,
                 chunks: typing.Optional[typing.Mapping[str, Chunk]] = None
                 ) -> typing.List[Violation]:
    """
    Verify all graph invariants

    Return a list of violations, one per offending entity, relation
    or index entry.  An empty list means the graph is consistent.
    If `chunks` is given, source_chunk_id references are checked
    against it as well.
    """

    violations = []
    schema = graph.schema

    for e in graph.entities.values():
        if schema.mode == SchemaMode.CLOSED:
            if e.entity_type not in schema.entity_types:
                violations.append(Violation(
                    e.id, 'unknown-entity-type',
                    f'{e.entity_type} is not part of the closed schema'))
        elif not OPEN_LABEL_RE.match(e.entity_type):
            violations.append(Violation(
                e.id, 'entity-type-form',
                f'{e.entity_type!r} is not in lowercase_with_underscores '
                f'form'))
        if chunks is not None:
            chunk = chunks.get(e.source_chunk_id)
            if chunk is None:
                violations.append(Violation(
                    e.id, 'unknown-chunk',
                    f'source chunk {e.source_chunk_id!r} does not exist'))
            elif chunk.source_id != e.source_id:
                violations.append(Violation(
                    e.id, 'chunk-source',
                    f'chunk {chunk.id} belongs to {chunk.source_id}, '
                    f'not {e.source_id}'))

    for rel in graph.relations.values():
        violation = graph.check_relation(rel)
        if violation is not None:
            violations.append(violation)

    expected_out: typing.Dict[str, typing.List[str]] = {}
    expected_in: typing.Dict[str, typing.List[str]] = {}
    for rel in graph.relations.values():
        expected_out.setdefault(rel.source_entity_id, []).append(rel.id)
        expected_in.setdefault(rel.target_entity_id, []).append(rel.id)
    for name, expected, actual in (('out', expected_out, graph.out_index),
                                   ('in', expected_in, graph.in_index)):
        for key in sorted(set(expected) | set(actual)):
            if sorted(expected.get(key, [])) != sorted(actual.get(key, [])):
                violations.append(Violation(
                    key, 'index-mismatch',
                    f'{name}-index of {key} does not match relations'))

    return violations


class GraphStatistics(typing.NamedTuple):
    entities: int
    relations: int
    entity_types: typing.Dict[str, int]
    relation_types: typing.Dict[str, int]
    sources: typing.Dict[str, int]
    cross_policy_links: int
    singleton_types: int
    dominant_type_share: float


def graph_statistics(graph: KnowledgeGraph) -> GraphStatistics:
    """
    Compute size and shape statistics of `graph`

    Singleton types are entity types used by exactly one entity,
    a sign of type proliferation in open schemas.
    """

    source_counts = collections.Counter(
        e.source_id for e in graph.entities.values())
    type_counts = graph.entity_type_counts
    share = 0.0
    if graph.entities:
        share = max(type_counts.values()) / len(graph.entities)
    return GraphStatistics(
        entities=len(graph.entities),
        relations=len(graph.relations),
        entity_types=dict(sorted(type_counts.items())),
        relation_types=dict(sorted(graph.relation_type_counts.items())),
        sources=dict(sorted(source_counts.items())),
        cross_policy_links=graph.relation_type_counts.get(CORRESPONDS_TO, 0),
        singleton_types=sum(1 for v in type_counts.values() if v == 1),
        dominant_type_share=share)


def format_statistics(stats: GraphStatistics) -> typing.Iterator[str]:
    """Yield human-readable lines describing `stats`"""
    yield f'entities: {stats.entities}'
    yield f'relations: {stats.relations}'
    yield f'cross-policy links: {stats.cross_policy_links}'
    yield f'singleton entity types: {stats.singleton_types}'
    yield f'dominant entity type share: {stats.dominant_type_share:.2f}'
    yield 'sources:'
    for k, v in stats.sources.items():
        yield f'  {k}: {v}'
    yield 'entity types:'
    for k, v in stats.entity_types.items():
        yield f'  {k}: {v}'
    yield 'relation types:'
    for k, v in stats.relation_types.items():
        yield f'  {k}: {v}'


def entity_to_json(entity: Entity) -> typing.Dict[str, typing.Any]:
    return dict(entity._asdict())


def entity_from_json(data: typing.Mapping[str, typing.Any]) -> Entity:
    unknown = set(data) - set(Entity._fields)
    if unknown:
        raise GraphError(f'unknown entity fields: {sorted(unknown)}')
    return Entity(**data)


def relation_to_json(rel: Relation) -> typing.Dict[str, typing.Any]:
    return dict(rel._asdict())


def relation_from_json(data: typing.Mapping[str, typing.Any]) -> Relation:
    unknown = set(data) - set(Relation._fields)
    if unknown:
        raise GraphError(f'unknown relation fields: {sorted(unknown)}')
    return Relation(**data)


def chunk_to_json(chunk: Chunk) -> typing.Dict[str, typing.Any]:
    return dict(chunk._asdict())


def chunk_from_json(data: typing.Mapping[str, typing.Any]) -> Chunk:
    unknown = set(data) - set(Chunk._fields)
    if unknown:
        raise GraphError(f'unknown chunk fields: {sorted(unknown)}')
    return Chunk(**data)
