# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Query layer over a finished knowledge graph. """

import enum
import typing

import networkx as nx

from policykg.llm import TOKEN_RE, Embedder, UndefinedSimilarity, cosine
from policykg.model import KnowledgeGraph, entity_to_json


class GraphStoreError(Exception):
    pass


class EntityNotFound(GraphStoreError):
    pass


class EmbeddingsMissing(GraphStoreError):
    pass


class EmptyQuery(GraphStoreError):
    pass


class MatchKind(enum.Enum):
    KEYWORD = 'keyword'
    SEMANTIC = 'semantic'


class SearchHit(typing.NamedTuple):
    entity_id: str
    score: float
    match_kind: MatchKind


class Subgraph(typing.NamedTuple):
    entity_ids: typing.List[str]
    relation_ids: typing.List[str]


class PathResult(typing.NamedTuple):
    entity_ids: typing.List[str]
    relation_ids: typing.List[str]


def tokenize(text: str) -> typing.List[str]:
    return TOKEN_RE.findall(text.lower())


def undirected_view(graph: KnowledgeGraph) -> nx.Graph:
    """
    Get an undirected networkx Graph over `graph`

    Every edge carries a sorted `relations` list of the ids
    of all relations joining its endpoints, in either direction.
    """

    view = nx.Graph()
    view.add_nodes_from(sorted(graph.entities))
    for rel in graph.relations.values():
        u, v = rel.source_entity_id, rel.target_entity_id
        existing = view.get_edge_data(u, v)
        if existing is None:
            view.add_edge(u, v, relations=[rel.id])
        else:
            existing['relations'] = sorted(existing['relations']
                                           + [rel.id])
    return view


class GraphStore(object):
    """
    Read-only query operations over a finished KnowledgeGraph

    Every operation is deterministic: ties are broken by entity id.
    Traversal ignores relation direction.  The graph must not be
    mutated after the store is constructed.
    """

    def __init__(self,
                 graph: KnowledgeGraph,
                 embedder: typing.Optional[Embedder] = None
                 ) -> None:
        self.graph = graph
        self.embedder = embedder
        self.view = undirected_view(graph)

    def _check_entity(self, entity_id: str) -> None:
        if entity_id not in self.graph.entities:
            raise EntityNotFound(f'unknown entity id: {entity_id}')

    def keyword_search(self,
                       query: str,
                       k: int = 10
                       ) -> typing.List[SearchHit]:
        """
        Search entities by query tokens

        Every distinct query token scores 2 if it occurs in the entity
        name, 1 if it occurs only in the description.  Entities with
        a positive score are returned, best first.
        """

        if k < 1:
            raise ValueError(f'k must be at least 1: {k}')
        tokens = sorted(set(tokenize(query)))
        if not tokens:
            raise EmptyQuery('empty keyword query')

        hits = []
        for e in self.graph.entities.values():
            name = set(tokenize(e.name))
            description = set(tokenize(e.description))
            score = sum(2 if t in name else 1 if t in description else 0
                        for t in tokens)
            if score > 0:
                hits.append(SearchHit(e.id, float(score),
                                      MatchKind.KEYWORD))
        hits.sort(key=lambda h: (-h.score, h.entity_id))
        return hits[:k]

    def semantic_search(self,
                        query: str,
                        k: int = 10
                        ) -> typing.List[SearchHit]:
        """
        Rank entities by cosine similarity to the embedded query

        Entities whose embedding is the zero vector are skipped.
        Raises EmbeddingsMissing if there is no embedder or some
        entity lacks an embedding.
        """

        if k < 1:
            raise ValueError(f'k must be at least 1: {k}')
        if not query.strip():
            raise EmptyQuery('empty semantic query')
        if self.embedder is None:
            raise EmbeddingsMissing('semantic search requires an embedder')
        missing = [e.id for e in self.graph.entities.values()
                   if e.embedding is None]
        if missing:
            raise EmbeddingsMissing(
                f'{len(missing)} entities have no embedding (first: '
                f'{missing[0]}), run the embed command first')

        qv = self.embedder.embed([query])[0]
        hits = []
        for e in self.graph.entities.values():
            assert e.embedding is not None
            try:
                score = cosine(qv, e.embedding)
            except UndefinedSimilarity:
                continue
            hits.append(SearchHit(e.id, score, MatchKind.SEMANTIC))
        hits.sort(key=lambda h: (-h.score, h.entity_id))
        return hits[:k]

    def relations_among(self,
                        entity_ids: typing.Iterable[str]
                        ) -> typing.List[str]:
        """Ids of all relations with both endpoints in `entity_ids`"""
        nodes = set(entity_ids)
        return sorted(set(
            rid for u in nodes for v in self.view.neighbors(u)
            if v in nodes for rid in self.view[u][v]['relations']))

    def expand_neighbors(self,
                         entity_id: str,
                         depth: int = 1
                         ) -> Subgraph:
        """
        Collect entities within `depth` hops of `entity_id`

        Entity ids are returned in BFS order (neighbors visited
        in id order), relation ids sorted.
        """

        self._check_entity(entity_id)
        if depth < 1:
            raise ValueError(f'depth must be at least 1: {depth}')
        order = [entity_id] + [v for u, v in nx.bfs_edges(
            self.view, entity_id, depth_limit=depth,
            sort_neighbors=sorted)]
        return Subgraph(order, self.relations_among(order))

    def entity_detail(self,
                      entity_id: str
                      ) -> typing.Dict[str, typing.Any]:
        """
        Return the full entity record plus its incident relations

        Each relation is listed with a direction marker relative
        to the entity ("outgoing" or "incoming").
        """

        self._check_entity(entity_id)
        relations = []
        for rid in self.graph.incident_relations(entity_id):
            rel = self.graph.relations[rid]
            outgoing = rel.source_entity_id == entity_id
            other = (rel.target_entity_id if outgoing
                     else rel.source_entity_id)
            relations.append({
                'relation_id': rid,
                'relation_type': rel.relation_type,
                'direction': 'outgoing' if outgoing else 'incoming',
                'other_id': other,
                'other_name': self.graph.entities[other].name,
                'description': rel.description,
                'similarity': rel.similarity,
            })
        return {
            'entity': entity_to_json(self.graph.entities[entity_id]),
            'relations': relations,
        }

    def find_path(self,
                  src_id: str,
                  dst_id: str,
                  max_len: int = 4
                  ) -> typing.Optional[PathResult]:
        """
        Find the shortest undirected path between two entities

        Among equally short paths, the one with the lexicographically
        smallest entity id sequence wins.  Returns None if there is
        no path of at most `max_len` relations.
        """

        self._check_entity(src_id)
        self._check_entity(dst_id)
        if max_len < 1:
            raise ValueError(f'max_len must be at least 1: {max_len}')
        if src_id == dst_id:
            return PathResult([src_id], [])

        dist = nx.single_source_shortest_path_length(self.view, dst_id,
                                                     cutoff=max_len)
        if src_id not in dist:
            return None
        entity_ids = [src_id]
        relation_ids = []
        current = src_id
        while current != dst_id:
            step = min(n for n in self.view.neighbors(current)
                       if dist.get(n) == dist[current] - 1)
            relation_ids.append(self.view[current][step]['relations'][0])
            entity_ids.append(step)
            current = step
        return PathResult(entity_ids, relation_ids)

    def schema_summary(self) -> str:
        return schema_summary(self.graph)


def schema_summary(graph: KnowledgeGraph) -> str:
    """
    Describe the graph schema and sizes

    All vocabulary types are listed (zero counts included), sorted
    alphabetically, one per indented line.
    """

    schema = graph.schema
    lines = [
        f'schema: {schema.mode.value}',
        f'sources: {", ".join(graph.sources) or "(none)"}',
        f'entities: {len(graph.entities)}',
        f'relations: {len(graph.relations)}',
        'entity types:',
    ]
    for t in sorted(schema.entity_types | set(graph.entity_type_counts)):
        lines.append(f'  {t}: {graph.entity_type_counts.get(t, 0)}')
    lines.append('relation types:')
    for t in sorted(schema.relation_types
                    | set(graph.relation_type_counts)):
        lines.append(f'  {t}: {graph.relation_type_counts.get(t, 0)}')
    return '\n'.join(lines) + '\n'
