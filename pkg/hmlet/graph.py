"""
Interaction data: parsing of edge lists, k-core filtering, the per-user train/validation/test
split and the symmetrically normalized user-item adjacency.

Nodes live in one combined index space: users occupy ``0 .. |U|-1``, items ``|U| .. |U|+|I|-1``.
"""
import io
import json
import logging
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from django.core.exceptions import ImproperlyConfigured

from hmlet.exceptions import EmptyDatasetError, ParseError
from hmlet.numerics import Rng

logger = logging.getLogger(__name__)

FORMAT_AUTO = 'auto'
FORMAT_PAIRS = 'pairs'
FORMAT_GROUPED = 'grouped'
FORMATS = (FORMAT_AUTO, FORMAT_PAIRS, FORMAT_GROUPED)

DEFAULT_RATIOS = (0.8, 0.1, 0.1)
SPLITS = ('train', 'val', 'test')

ID_MAP_FILENAME = 'id_map.txt'
STATS_FILENAME = 'stats.json'


@dataclass(frozen=True)
class RawInteractions:
    """Deduplicated set of (user-id, item-id) pairs, kept sorted for reproducibility."""
    pairs: tuple

    def __post_init__(self):
        object.__setattr__(self, 'pairs', tuple(sorted(set(self.pairs))))

    def __len__(self):
        return len(self.pairs)

    @cached_property
    def users(self):
        return sorted({user for user, _ in self.pairs})

    @cached_property
    def items(self):
        return sorted({item for _, item in self.pairs})

    def by_user(self):
        grouped = defaultdict(list)
        for user, item in self.pairs:
            grouped[user].append(item)
        return grouped


@dataclass(frozen=True)
class InteractionGraph:
    num_users: int
    num_items: int
    user_index: dict
    item_index: dict
    train: list
    val: list
    test: list
    user_degree: np.ndarray = field(repr=False)
    item_degree: np.ndarray = field(repr=False)

    @property
    def num_nodes(self):
        return self.num_users + self.num_items

    @property
    def num_train(self):
        return int(self.user_degree.sum())

    @property
    def num_interactions(self):
        return sum(len(items) for split in (self.train, self.val, self.test) for items in split)

    def get_split(self, name):
        if name not in SPLITS:
            raise ImproperlyConfigured(f"Unknown split '{name}', expected one of {', '.join(SPLITS)}.")
        return getattr(self, name)

    @cached_property
    def train_pairs(self):
        """Training interactions as two parallel index arrays (users, items)."""
        users = np.repeat(np.arange(self.num_users), self.user_degree)
        items = np.concatenate(self.train) if self.num_users else np.empty(0, dtype=np.int64)
        return users, items.astype(np.int64)

    @cached_property
    def train_keys(self):
        """Sorted ``user·|I| + item`` codes of the training pairs, for membership tests."""
        users, items = self.train_pairs
        return np.sort(users * self.num_items + items)

    def interaction_matrix(self):
        users, items = self.train_pairs
        data = np.ones(len(users))
        return sp.csr_matrix((data, (users, items)), shape=(self.num_users, self.num_items))

    def excluded_items(self, user, split):
        """Items not eligible as candidates when ranking for ``user`` on ``split``."""
        if split == 'test':
            return np.union1d(self.train[user], self.val[user])
        return self.train[user]

    @cached_property
    def user_ids(self):
        return sorted(self.user_index, key=self.user_index.__getitem__)

    @cached_property
    def item_ids(self):
        return sorted(self.item_index, key=self.item_index.__getitem__)


@dataclass(frozen=True)
class NormalizedAdjacency:
    """
    Symmetric bipartite CSR matrix over all nodes. Entry (u, |U|+v) and its mirror hold
    ``1/sqrt(|N_u|·|N_v|)`` for every training pair.
    """
    num_users: int
    num_items: int
    matrix: sp.csr_matrix = field(repr=False)

    @property
    def n(self):
        return self.num_users + self.num_items

    @property
    def row_ptr(self):
        return self.matrix.indptr

    @property
    def col_idx(self):
        return self.matrix.indices

    @property
    def values(self):
        return self.matrix.data

    @property
    def nnz(self):
        return self.matrix.nnz

    def user_item_block(self):
        return self.matrix[:self.num_users, self.num_users:].tocsr()

    @classmethod
    def from_block(cls, num_users, num_items, block):
        """Mirror a |U|×|I| weight block into the combined symmetric node matrix."""
        block = sp.csr_matrix(block, shape=(num_users, num_items))
        matrix = sp.bmat([[None, block], [block.T, None]], format='csr')
        matrix.sort_indices()
        return cls(num_users=num_users, num_items=num_items, matrix=matrix)


def _tokenize(source):
    if isinstance(source, (str, Path)):
        with open(source, 'rb') as fh:
            content = fh.read()
    elif isinstance(source, bytes):
        content = source
    else:
        content = source.read()
    if isinstance(content, bytes):
        try:
            content = content.decode('utf-8')
        except UnicodeDecodeError as exc:
            raise ParseError(f"Input is not valid UTF-8: {exc}") from exc
    for line_number, line in enumerate(io.StringIO(content), start=1):
        tokens = line.split()
        if tokens:
            yield line_number, tokens


def load_interactions(source, format=FORMAT_AUTO):
    """
    Parse an edge list. Every line is either ``user item`` or, in the grouped format,
    ``user item item ...``. The automatic format accepts both since a two-token line means
    the same in either of them.
    """
    if format not in FORMATS:
        raise ImproperlyConfigured(f"Unknown edge-list format '{format}', expected one of {', '.join(FORMATS)}.")
    pairs = set()
    for line_number, tokens in _tokenize(source):
        if len(tokens) < 2:
            raise ParseError("expected a user followed by at least one item", line_number)
        if format == FORMAT_PAIRS and len(tokens) > 2:
            raise ParseError(f"expected exactly two tokens, found {len(tokens)}", line_number)
        user = tokens[0]
        pairs.update((user, item) for item in tokens[1:])
    if not pairs:
        raise EmptyDatasetError("The interaction data is empty.")
    return RawInteractions(pairs=tuple(pairs))


def kcore_filter(raw, k):
    """
    Remove users and items with fewer than ``k`` interactions until every survivor has at
    least ``k``. Peeling in any order reaches the same maximal subgraph.
    """
    if k < 1:
        raise ValueError("k must be at least 1.")
    user_items = defaultdict(set)
    item_users = defaultdict(set)
    for user, item in raw.pairs:
        user_items[user].add(item)
        item_users[item].add(user)

    queue = deque()
    queue.extend(('user', u) for u, items in user_items.items() if len(items) < k)
    queue.extend(('item', v) for v, users in item_users.items() if len(users) < k)
    removed = 0
    while queue:
        kind, node = queue.popleft()
        own, other = (user_items, item_users) if kind == 'user' else (item_users, user_items)
        if node not in own:
            continue
        other_kind = 'item' if kind == 'user' else 'user'
        for neighbor in own.pop(node):
            neighbors = other[neighbor]
            neighbors.discard(node)
            if len(neighbors) == k - 1:
                queue.append((other_kind, neighbor))
        removed += 1

    pairs = tuple((u, v) for u, items in user_items.items() for v in items)
    logger.info("k-core filter (k=%d) removed %d nodes, %d of %d interactions remain",
                k, removed, len(pairs), len(raw))
    if not pairs:
        raise EmptyDatasetError(f"No interactions survive the {k}-core filter.")
    return RawInteractions(pairs=pairs)


def _share(ratio, degree):
    # rounding guards against 0.1 * 30 == 3.0000000000000004
    return math.ceil(round(ratio * degree, 9))


def _partition_sizes(degree, ratios):
    n_train = min(_share(ratios[0], degree), degree)
    remainder = degree - n_train
    n_val = min(_share(ratios[1], degree), remainder)
    n_test = remainder - n_val
    if n_train == 0 and degree > 0:
        if n_test > 0:
            n_test -= 1
        else:
            n_val -= 1
        n_train = 1
    return n_train, n_val, n_test


def split(raw, ratios=DEFAULT_RATIOS, seed=0):
    """
    Partition every user's items at random into train, validation and test. Users and items are
    indexed in the sorted order of their ids.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ImproperlyConfigured(f"Split ratios must be three non-negative numbers adding up to 1, got {ratios}.")
    user_index = {user: index for index, user in enumerate(raw.users)}
    item_index = {item: index for index, item in enumerate(raw.items)}
    rng = Rng(seed).stream('split')

    parts = {name: [] for name in SPLITS}
    for user, items in sorted(raw.by_user().items(), key=lambda kv: user_index[kv[0]]):
        indices = np.array(sorted(item_index[item] for item in items), dtype=np.int64)
        shuffled = indices[rng.permutation(len(indices))]
        n_train, n_val, _ = _partition_sizes(len(indices), ratios)
        parts['train'].append(np.sort(shuffled[:n_train]))
        parts['val'].append(np.sort(shuffled[n_train:n_train + n_val]))
        parts['test'].append(np.sort(shuffled[n_train + n_val:]))

    return _assemble(user_index, item_index, parts)


def _assemble(user_index, item_index, parts):
    num_users, num_items = len(user_index), len(item_index)
    user_degree = np.array([len(items) for items in parts['train']], dtype=np.int64)
    item_degree = np.zeros(num_items, dtype=np.int64)
    for items in parts['train']:
        item_degree[items] += 1
    graph = InteractionGraph(
        num_users=num_users,
        num_items=num_items,
        user_index=user_index,
        item_index=item_index,
        user_degree=user_degree,
        item_degree=item_degree,
        **parts,
    )
    logger.info("Split %d users and %d items into %d/%d/%d interactions", num_users, num_items,
                *(sum(len(items) for items in parts[name]) for name in SPLITS))
    return graph


def graph_from_splits(train, val=None, test=None, num_items=None):
    """
    Build a graph directly from per-user item indices. Users are named ``u<index>`` and items
    ``i<index>``.
    """
    num_users = len(train)
    parts = {'train': train, 'val': val or [[] for _ in range(num_users)], 'test': test or [[] for _ in range(num_users)]}
    parts = {name: [np.array(sorted(items), dtype=np.int64) for items in per_user] for name, per_user in parts.items()}
    if num_items is None:
        num_items = 1 + max((int(items.max()) for per_user in parts.values() for items in per_user if len(items)), default=-1)
    user_index = {f'u{u}': u for u in range(num_users)}
    item_index = {f'i{v}': v for v in range(num_items)}
    return _assemble(user_index, item_index, parts)


def build_adjacency(graph):
    """Symmetric normalization ``D^-1/2 A D^-1/2`` of the training interactions."""
    users, items = graph.train_pairs
    if len(users) == 0:
        raise EmptyDatasetError("Cannot build an adjacency without training interactions.")
    weights = 1.0 / np.sqrt(graph.user_degree[users].astype(np.float64) * graph.item_degree[items])
    block = sp.csr_matrix((weights, (users, items)), shape=(graph.num_users, graph.num_items))
    return NormalizedAdjacency.from_block(graph.num_users, graph.num_items, block)


def dataset_statistics(raw):
    num_users, num_items, interactions = len(raw.users), len(raw.items), len(raw)
    return {
        'users': num_users,
        'items': num_items,
        'interactions': interactions,
        'sparsity': 1.0 - interactions / (num_users * num_items),
    }


def write_prepared(graph, directory, stats=None):
    """
    Write the split as grouped text files using the original ids, together with the id map
    and the dataset statistics.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    user_ids, item_ids = graph.user_ids, graph.item_ids
    for name in SPLITS:
        lines = []
        for user, items in enumerate(graph.get_split(name)):
            if len(items):
                lines.append(' '.join([user_ids[user], *(item_ids[v] for v in items)]))
        (directory / f'{name}.txt').write_text(''.join(f'{line}\n' for line in lines), encoding='utf-8')
    id_lines = [f'{user}\t{index}\n' for index, user in enumerate(user_ids)]
    id_lines.extend(f'{item}\t{graph.num_users + index}\n' for index, item in enumerate(item_ids))
    (directory / ID_MAP_FILENAME).write_text(''.join(id_lines), encoding='utf-8')
    stats = dict(stats or {}, num_users=graph.num_users, num_items=graph.num_items)
    (directory / STATS_FILENAME).write_text(json.dumps(stats, indent=2, sort_keys=True) + '\n', encoding='utf-8')


def read_prepared(directory):
    """Reload a dataset written by :func:`write_prepared`."""
    directory = Path(directory)
    stats = json.loads((directory / STATS_FILENAME).read_text(encoding='utf-8'))
    num_users = stats['num_users']
    user_index, item_index = {}, {}
    for line_number, tokens in _tokenize(directory / ID_MAP_FILENAME):
        if len(tokens) != 2:
            raise ParseError("expected 'original-id TAB node-index'", line_number)
        node = int(tokens[1])
        if node < num_users:
            user_index[tokens[0]] = node
        else:
            item_index[tokens[0]] = node - num_users
    parts = {}
    for name in SPLITS:
        per_user = [[] for _ in range(num_users)]
        for line_number, tokens in _tokenize(directory / f'{name}.txt'):
            try:
                user = user_index[tokens[0]]
                per_user[user].extend(item_index[item] for item in tokens[1:])
            except KeyError as exc:
                raise ParseError(f"unknown id {exc}", line_number) from exc
        parts[name] = [np.array(sorted(items), dtype=np.int64) for items in per_user]
    return _assemble(user_index, item_index, parts)
