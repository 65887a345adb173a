"""
Compressed radix tree over token (or token-block) id sequences with per-owner
ownership, used by the proxy to estimate prefix cache hits on prefill nodes.

Ownership has two states. An insert makes the path *pending* for the owner: the KV
entries are being computed and other requests cannot reuse them yet, except requests
scheduled in the same batch. ``commit`` turns pending ownership into cached ownership
once prefill finishes. Each owner has a token capacity; committing past it evicts the
owner's least recently used leaves.
"""
import collections
import logging
import math

logger = logging.getLogger(__name__)


class _Node(object):
    __slots__ = ('key', 'children', 'parent', 'owners', 'pending', 'marks')

    def __init__(self, key=(), parent=None):
        self.key = key
        self.children = {}
        self.parent = parent
        # committed owner -> last access tick
        self.owners = {}
        # owner -> number of uncommitted inserts through this node
        self.pending = collections.Counter()
        # owner -> batch id of its newest pending insert
        self.marks = {}

    def __repr__(self):
        return '_Node(%r, owners=%s)' % (self.key, sorted(self.owners))


def _common_prefix(a, b):
    n = min(len(a), len(b))
    i = 0
    while i < n and a[i] == b[i]:
        i += 1
    return i


class PrefixTree(object):
    """
    :param block_size:  tokens represented by one sequence element
    :param capacity:    committed tokens an owner may hold, None for unlimited
    """

    def __init__(self, block_size=1, capacity=None):
        self.block_size = block_size
        self.capacity = capacity
        self.root = _Node()
        self._owned = collections.Counter()
        # insertion-ordered so that eviction ties resolve the same way on every run
        self._owner_nodes = collections.defaultdict(dict)
        self._tick = 0
        self._batches = 0
        self.evicted_tokens = 0

    def new_batch(self):
        """id that makes the pending inserts of one scheduling call visible to each other"""
        self._batches += 1
        return self._batches

    def owned_tokens(self, owner):
        return self._owned[owner]

    def __len__(self):
        count = 0
        stack = [self.root]
        while stack:
            node = stack.pop()
            count += len(node.children)
            stack.extend(node.children.values())
        return count

    def _touch(self, node, owner):
        self._tick += 1
        node.owners[owner] = self._tick

    def _split(self, child, at):
        parent = child.parent
        mid = _Node(child.key[:at], parent)
        mid.owners = dict(child.owners)
        mid.pending = collections.Counter(child.pending)
        mid.marks = dict(child.marks)
        child.key = child.key[at:]
        child.parent = mid
        mid.children[child.key[0]] = child
        parent.children[mid.key[0]] = mid
        for owner in mid.owners:
            self._owner_nodes[owner][mid] = None
        return mid

    def _path(self, seq):
        """nodes covering ``seq`` exactly, None when it is not stored"""
        node = self.root
        i = 0
        path = []
        while i < len(seq):
            child = node.children.get(seq[i])
            if child is None or tuple(seq[i:i + len(child.key)]) != child.key:
                return None
            path.append(child)
            node = child
            i += len(child.key)
        return path

    def match(self, seq, owner, batch=None, touch=False):
        """
        Tokens of the longest prefix of ``seq`` cached by ``owner``; with ``batch`` the
        owner's pending inserts of that batch count as well.
        """
        node = self.root
        i = 0
        matched = 0
        seq = tuple(seq)
        while i < len(seq):
            child = node.children.get(seq[i])
            if child is None:
                break
            if owner not in child.owners and (batch is None or child.marks.get(owner) != batch):
                break
            common = _common_prefix(child.key, seq[i:])
            matched += common
            if touch and owner in child.owners:
                self._touch(child, owner)
            if common < len(child.key):
                break
            node = child
            i += common
        return matched * self.block_size

    def insert(self, seq, owner, batch=None):
        """
        Stores ``seq`` as pending for ``owner``.

        :return: number of sequence elements that were not in the tree before
        """
        seq = tuple(seq)
        node = self.root
        i = 0
        path = []
        created = 0
        while i < len(seq):
            child = node.children.get(seq[i])
            if child is None:
                child = _Node(seq[i:], node)
                node.children[seq[i]] = child
                created = len(seq) - i
                path.append(child)
                break
            common = _common_prefix(child.key, seq[i:])
            if common < len(child.key):
                child = self._split(child, common)
            path.append(child)
            node = child
            i += common
        for n in path:
            n.pending[owner] += 1
            if batch is not None:
                n.marks[owner] = batch
        return created

    def commit(self, seq, owner):
        """
        Turns a pending insert of ``seq`` into cached ownership and evicts past capacity.
        """
        path = self._path(tuple(seq))
        if path is None:
            raise KeyError('Sequence was never inserted for owner %r' % (owner,))
        for n in path:
            if n.pending[owner] > 0:
                n.pending[owner] -= 1
                if not n.pending[owner]:
                    del n.pending[owner]
            if owner not in n.owners:
                self._owned[owner] += len(n.key) * self.block_size
                self._owner_nodes[owner][n] = None
            self._touch(n, owner)
        if self.capacity is not None:
            self._evict(owner)

    def add(self, seq, owner):
        """insert and commit in one go"""
        self.insert(seq, owner)
        self.commit(seq, owner)

    def _prune(self, node):
        while node is not self.root and not node.owners and not node.pending and not node.children:
            parent = node.parent
            del parent.children[node.key[0]]
            node = parent

    def _evict(self, owner):
        nodes = self._owner_nodes[owner]
        while self._owned[owner] > self.capacity:
            victim = None
            oldest = math.inf
            for n in nodes:
                if n.pending.get(owner) or any(owner in c.owners for c in n.children.values()):
                    continue
                if n.owners[owner] < oldest:
                    victim, oldest = n, n.owners[owner]
            if victim is None:
                logger.debug('Owner %r over capacity but every entry is in use', owner)
                return
            del victim.owners[owner]
            del nodes[victim]
            freed = len(victim.key) * self.block_size
            self._owned[owner] -= freed
            self.evicted_tokens += freed
            self._prune(victim)
