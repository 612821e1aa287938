import os
import pytest

import numpy as np

from hmlet.graph import RawInteractions, build_adjacency, graph_from_splits, split

os.environ.setdefault('DJANGO_ALLOW_ASYNC_UNSAFE', 'true')

BLOCK_USERS = 200
BLOCK_ITEMS = 200
WITHIN_RATE = 0.3
CROSS_RATE = 0.01


def two_block_pairs(seed=11, num_users=BLOCK_USERS, num_items=BLOCK_ITEMS):
    """Bipartite graph of two communities: users and items in the same half interact more often."""
    generator = np.random.default_rng(seed)
    same_block = (np.arange(num_users)[:, None] < num_users // 2) == (np.arange(num_items)[None, :] < num_items // 2)
    rate = np.where(same_block, WITHIN_RATE, CROSS_RATE)
    users, items = np.nonzero(generator.random((num_users, num_items)) < rate)
    return [(f'u{u:03d}', f'i{v:03d}') for u, v in zip(users, items)]


@pytest.fixture(scope='session')
def two_block_raw():
    return RawInteractions(pairs=tuple(two_block_pairs()))


@pytest.fixture(scope='session')
def two_block_graph(two_block_raw):
    return split(two_block_raw, seed=7)


@pytest.fixture
def small_graph():
    """Four users, four items, every user with two training items and one held out item."""
    return graph_from_splits(
        train=[[0, 1], [1, 2], [2, 3], [0, 3]],
        val=[[2], [], [0], []],
        test=[[3], [0], [], [1]],
        num_items=4,
    )


@pytest.fixture
def small_adjacency(small_graph):
    return build_adjacency(small_graph)


@pytest.fixture
def edge_list(tmp_path):
    """A raw edge list where every user and item survives a 2-core filter."""
    lines = []
    for user in range(6):
        for item in range(5):
            if (user + item) % 3 != 0:
                lines.append(f'user{user} item{item}\n')
    path = tmp_path / 'edges.txt'
    path.write_text(''.join(lines), encoding='utf-8')
    return path
