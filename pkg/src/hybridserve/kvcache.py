"""Block-granular KV cache with prefix sharing and task-aware eviction.

Blocks held by running requests are pinned.  Every other resident block is
indexed in the prefix trie and may be evicted, but only once it is a leaf of
the trie (its indexed children are gone), so a cached prefix shrinks from
the tail and never leaves unreachable blocks behind.  The set of evictable
blocks is the free table, a lazy heap ordered by ``(priority, lat, id)``.
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

INF = math.inf


class CacheError(RuntimeError):
    pass


class UnsatisfiableAllocation(CacheError):
    """The request cannot fit even in an empty cache."""


class EvictionImpossible(CacheError):
    """Not enough evictable blocks to cover the deficit."""


class TaskClass(enum.Enum):
    RUNNING_ONLINE = "running_online"
    ACTIVE_OFFLINE = "active_offline"
    FINISHED_ONLINE = "finished_online"
    FINISHED_OFFLINE = "finished_offline"


class EvictionPolicy(enum.Enum):
    TASK_AWARE = "task_aware"
    LRU = "lru"


@dataclass(frozen=True)
class BlockMeta:
    block_id: int
    lat: float
    rc: int
    task_class: TaskClass
    token_span: tuple  # (first token position, block_size)
    pinned: bool = False
    parent_id: Optional[int] = None
    evictable: bool = False
    indexed: bool = False


def priority_of(meta: BlockMeta) -> float:
    cls = meta.task_class
    if cls is TaskClass.RUNNING_ONLINE:
        return INF
    if cls is TaskClass.ACTIVE_OFFLINE:
        return float(meta.rc)
    if cls is TaskClass.FINISHED_ONLINE:
        return 0.5
    return 0.0


@dataclass(frozen=True)
class Allocation:
    blocks: tuple


@dataclass(frozen=True)
class NeedsEviction:
    deficit_tokens: int
    reason: str  # "capacity" or "threshold"


@dataclass(frozen=True)
class EvictionResult:
    victims: tuple
    punishment_tokens: int


@dataclass(frozen=True)
class Occupancy:
    running_occupied: int
    online_free: int
    offline_free: int


class _Node:
    __slots__ = ("key", "parent", "children", "depth", "block", "rc", "inflight",
                 "resident_children", "refs")

    def __init__(self, key, parent, depth):
        self.key = key
        self.parent = parent
        self.children = {}
        self.depth = depth
        self.block = None
        self.rc = 0
        self.inflight = 0
        self.resident_children = 0
        self.refs = 0  # tables that point at this node


class _Block:
    __slots__ = ("id", "node", "lat", "holders", "online_holders", "offline_holders",
                 "last_online", "in_free", "version", "position")

    def __init__(self, bid, position, now):
        self.id = bid
        self.node = None
        self.lat = now
        self.holders = 0
        self.online_holders = 0
        self.offline_holders = 0
        self.last_online = False
        self.in_free = False
        self.version = 0
        self.position = position


class _Table:
    __slots__ = ("request", "blocks", "nodes", "inflight_from", "online")

    def __init__(self, request):
        self.request = request
        self.blocks = []
        self.nodes = []  # trie nodes of the indexed (full) blocks, in order
        self.inflight_from = None
        self.online = request.is_online


class KVCache:
    """KV cache state for one accelerator.

    Sizes are in tokens at the interface and blocks internally; partially
    filled blocks count as whole blocks against the capacity.
    """

    def __init__(
        self,
        capacity_tokens: int,
        block_size: int = 16,
        policy: EvictionPolicy = EvictionPolicy.TASK_AWARE,
        threshold_tokens: Optional[int] = None,
    ):
        if capacity_tokens < block_size or block_size < 1:
            raise ValueError("capacity must hold at least one block")
        self.block_size = block_size
        self.capacity_blocks = capacity_tokens // block_size
        self.capacity_tokens = self.capacity_blocks * block_size
        self.policy = EvictionPolicy(policy)
        self.threshold_tokens = self.capacity_tokens
        if threshold_tokens is not None:
            self.set_threshold(threshold_tokens)
        self.root = _Node(None, None, 0)
        self.blocks = {}
        self.tables = {}
        self.pinned_blocks = 0
        self.online_pinned_blocks = 0
        self._next_id = 0
        self._heap = []
        self._n_free = 0  # blocks with in_free set
        self._chains = {}  # offline request id -> list of trie nodes
        self.evicted_total = 0
        self._online_free = 0  # unpinned blocks classed FinishedOnline

    # ------------------------------------------------------------------ sizes

    @property
    def resident_blocks(self) -> int:
        return len(self.blocks)

    @property
    def threshold_blocks(self) -> int:
        return self.threshold_tokens // self.block_size

    def blocks_for(self, tokens: int) -> int:
        return -(-tokens // self.block_size)

    def set_threshold(self, tokens: int) -> None:
        if not 0 <= tokens <= self.capacity_tokens:
            raise ValueError(f"threshold {tokens} outside [0, {self.capacity_tokens}]")
        self.threshold_tokens = int(tokens)

    # ------------------------------------------------------------- priorities

    def _rc(self, blk: _Block) -> int:
        if blk.node is not None:
            return blk.node.rc
        return blk.offline_holders

    def _class(self, blk: _Block) -> TaskClass:
        if blk.online_holders:
            return TaskClass.RUNNING_ONLINE
        if self._rc(blk) > 0 or blk.offline_holders:
            return TaskClass.ACTIVE_OFFLINE
        return TaskClass.FINISHED_ONLINE if blk.last_online else TaskClass.FINISHED_OFFLINE

    def _priority(self, blk: _Block) -> float:
        if self.policy is EvictionPolicy.LRU:
            return 0.0
        cls = self._class(blk)
        if cls is TaskClass.RUNNING_ONLINE:
            return INF
        if cls is TaskClass.ACTIVE_OFFLINE:
            return float(self._rc(blk))
        return 0.5 if cls is TaskClass.FINISHED_ONLINE else 0.0

    def eviction_key(self, block_id: int) -> tuple:
        blk = self.blocks[block_id]
        return (self._priority(blk), blk.lat, blk.id)

    def meta(self, block_id: int) -> BlockMeta:
        blk = self.blocks[block_id]
        parent = None
        if blk.node is not None and blk.node.parent is not None and blk.node.parent.block is not None:
            parent = blk.node.parent.block.id
        return BlockMeta(
            block_id=blk.id,
            lat=blk.lat,
            rc=self._rc(blk),
            task_class=self._class(blk),
            token_span=(blk.position * self.block_size, self.block_size),
            pinned=blk.holders > 0,
            parent_id=parent,
            evictable=self._evictable(blk),
            indexed=blk.node is not None,
        )

    def metas(self) -> list:
        return [self.meta(b) for b in sorted(self.blocks)]

    # -------------------------------------------------------------- free table

    def _evictable(self, blk: _Block) -> bool:
        return blk.holders == 0 and blk.node is not None and blk.node.resident_children == 0

    def _push(self, blk: _Block) -> None:
        blk.version += 1
        if not blk.in_free:
            blk.in_free = True
            self._n_free += 1
        heapq.heappush(self._heap, (self._priority(blk), blk.lat, blk.id, blk.version))
        self._maybe_compact()

    def _maybe_compact(self) -> None:
        # stale entries never outnumber live ones by much; amortized O(1) per push
        if len(self._heap) > 2 * self._n_free + 256:
            self._heap = [e for e in self._heap if self._valid(e) is not None]
            heapq.heapify(self._heap)

    def _unfree(self, blk: _Block) -> None:
        if blk.in_free:
            blk.in_free = False
            blk.version += 1
            self._n_free -= 1

    def _refresh(self, blk: _Block) -> None:
        """Re-evaluate free-table membership after any key-relevant change."""
        if self._evictable(blk):
            self._push(blk)
        else:
            self._unfree(blk)

    def _valid(self, entry) -> Optional[_Block]:
        blk = self.blocks.get(entry[2])
        if blk is None or not blk.in_free or blk.version != entry[3]:
            return None
        return blk

    def free_table(self) -> list:
        """Evictable block ids in eviction order (no cascade)."""
        return sorted(
            (b for b in self.blocks.values() if self._evictable(b)),
            key=lambda b: (self._priority(b), b.lat, b.id),
        )

    def eviction_view(self) -> "EvictionView":
        self._maybe_compact()
        return EvictionView(self)

    # --------------------------------------------------------------- trie ops

    def _child(self, node: _Node, key, create: bool) -> Optional[_Node]:
        ch = node.children.get(key)
        if ch is None and create:
            ch = _Node(key, node, node.depth + 1)
            node.children[key] = ch
        return ch

    def _prune(self, node: _Node) -> None:
        while (
            node is not self.root
            and node.block is None
            and node.rc == 0
            and node.inflight == 0
            and node.refs == 0
            and not node.children
        ):
            parent = node.parent
            if parent.children.get(node.key) is not node:
                return  # already detached
            del parent.children[node.key]
            node = parent

    def _block_keys(self, tokens: Sequence[int], n_blocks: int):
        bs = self.block_size
        for i in range(n_blocks):
            yield tuple(tokens[i * bs:(i + 1) * bs])

    def chain(self, tokens: Sequence[int], create: bool = False) -> list:
        """Trie nodes of the full blocks of ``tokens`` (stops at the first gap)."""
        node = self.root
        out = []
        for key in self._block_keys(tokens, len(tokens) // self.block_size):
            node = self._child(node, key, create)
            if node is None:
                break
            out.append(node)
        return out

    @staticmethod
    def resident_prefix(chain: Sequence[_Node]) -> int:
        """Number of leading resident nodes; residency is ancestor-closed."""
        lo, hi = 0, len(chain)
        while lo < hi:
            mid = (lo + hi) // 2
            if chain[mid].block is not None:
                lo = mid + 1
            else:
                hi = mid
        return lo

    def match(self, tokens: Sequence[int]) -> tuple:
        """Longest resident cached prefix of ``tokens`` without touching it."""
        node = self.root
        blocks = []
        for key in self._block_keys(tokens, len(tokens) // self.block_size):
            node = node.children.get(key)
            if node is None or node.block is None:
                break
            blocks.append(node.block.id)
        return blocks, len(blocks) * self.block_size

    def lookup_prefix(self, prompt: Sequence[int], now: float) -> tuple:
        if len(prompt) == 0:
            raise ValueError("prompt must be non-empty")
        blocks, hit = self.match(prompt)
        for bid in blocks:
            self._touch(self.blocks[bid], now)
        return blocks, hit

    def _touch(self, blk: _Block, now: float) -> None:
        if now > blk.lat:
            blk.lat = now
            if blk.in_free:
                self._push(blk)

    # --------------------------------------------------- offline reference counts

    def offline_chain(self, request) -> list:
        """Cached trie chain of an offline request's known tokens (extended lazily)."""
        chain = self._chains.get(request.id)
        n_full = request.seq_len // self.block_size
        if chain is None:
            chain = []
            self._chains[request.id] = chain
        if len(chain) < n_full:
            node = chain[-1] if chain else self.root
            toks = request.tokens()
            bs = self.block_size
            for i in range(len(chain), n_full):
                node = self._child(node, tuple(toks[i * bs:(i + 1) * bs]), True)
                chain.append(node)
                self._rc_add(node, 1)
        return chain

    def _finished_online(self, blk: _Block) -> bool:
        return blk.holders == 0 and blk.last_online and self._rc(blk) == 0

    def _rc_add(self, node: _Node, delta: int) -> None:
        blk = node.block
        before = blk is not None and self._finished_online(blk)
        node.rc += delta
        if blk is None:
            return
        self._online_free += self._finished_online(blk) - before
        if blk.in_free and self.policy is EvictionPolicy.TASK_AWARE:
            self._push(blk)

    def register_offline(self, request) -> None:
        self.offline_chain(request)

    def unregister_offline(self, request) -> None:
        chain = self._chains.pop(request.id, None)
        if not chain:
            return
        for node in chain:
            self._rc_add(node, -1)
        for node in reversed(chain):
            self._prune(node)

    def update_references(self, pool: Iterable[Sequence[int]]) -> None:
        """Recompute every reference count from scratch.

        ``pool`` holds the token sequences of all unfinished offline requests.
        Incremental tracking through ``register_offline`` is equivalent.
        """
        stack = [self.root]
        while stack:
            node = stack.pop()
            node.rc = 0
            stack.extend(node.children.values())
        for toks in pool:
            for node in self.chain(toks, create=True):
                node.rc += 1
        self._online_free = 0
        for blk in self.blocks.values():
            self._online_free += self._finished_online(blk)
            if blk.in_free:
                self._push(blk)

    def rc_of(self, block_id: int) -> int:
        return self._rc(self.blocks[block_id])

    # ------------------------------------------------------------ allocation

    def _new_block(self, position: int, now: float) -> _Block:
        bid = self._next_id
        self._next_id += 1
        blk = _Block(bid, position, now)
        self.blocks[bid] = blk
        return blk

    def _pin(self, blk: _Block, online: bool) -> None:
        if blk.holders == 0:
            self.pinned_blocks += 1
            if self._finished_online(blk):
                self._online_free -= 1
        if online:
            if blk.online_holders == 0:
                self.online_pinned_blocks += 1
            blk.online_holders += 1
        else:
            blk.offline_holders += 1
        blk.holders += 1
        self._unfree(blk)

    def _unpin(self, blk: _Block, online: bool) -> None:
        blk.holders -= 1
        if online:
            blk.online_holders -= 1
            if blk.online_holders == 0:
                self.online_pinned_blocks -= 1
        else:
            blk.offline_holders -= 1
        if blk.holders == 0:
            self.pinned_blocks -= 1

    def has_table(self, request) -> bool:
        return request.id in self.tables

    def table_blocks(self, request) -> list:
        tab = self.tables.get(request.id)
        return [b.id for b in tab.blocks] if tab else []

    def held_blocks(self, request) -> int:
        tab = self.tables.get(request.id)
        return len(tab.blocks) if tab else 0

    def hit_for(self, request) -> tuple:
        """Resident prefix usable by ``request`` as (blocks, tokens), untouched.

        At least one token is always left to compute so the step can emit.
        """
        limit_blocks = (request.seq_len - 1) // self.block_size
        if request.is_online:
            blocks, _ = self.match(request.tokens()[: limit_blocks * self.block_size])
        else:
            chain = self.offline_chain(request)[:limit_blocks]
            n = self.resident_prefix(chain)
            blocks = [chain[i].block.id for i in range(n)]
        return blocks, len(blocks) * self.block_size

    def start_request(self, request, now: float) -> int:
        """Attach ``request`` to the cache, pinning its cached prefix.

        Returns the number of hit tokens; ``request.num_computed`` is set to it.
        """
        if request.id in self.tables:
            raise CacheError(f"request {request.id} already attached")
        blocks, hit = self.hit_for(request)
        tab = _Table(request)
        online = request.is_online
        for bid in blocks:
            blk = self.blocks[bid]
            self._touch(blk, now)
            self._pin(blk, online)
            tab.blocks.append(blk)
            tab.nodes.append(blk.node)
            blk.node.refs += 1
        self.tables[request.id] = tab
        request.num_computed = hit
        if not online:
            chain = self.offline_chain(request)
            prompt_blocks = request.prompt_len // self.block_size
            tab.inflight_from = len(blocks)
            for node in chain[len(blocks):prompt_blocks]:
                node.inflight += 1
        return hit

    @property
    def offline_pinned_blocks(self) -> int:
        """Pinned blocks held only by offline requests."""
        return self.pinned_blocks - self.online_pinned_blocks

    def check_allocation(self, request, new_blocks: int, extra_pinned: int = 0,
                         enforce_threshold: bool = True):
        """Feasibility of growing ``request`` by ``new_blocks``; None if it fits.

        The threshold bounds blocks pinned by offline work.  Online demand
        is what the reserve above the threshold is kept for.
        """
        if new_blocks > self.capacity_blocks:
            raise UnsatisfiableAllocation(
                f"{new_blocks} blocks requested, capacity is {self.capacity_blocks}"
            )
        if enforce_threshold and not request.is_online:
            over = self.offline_pinned_blocks + extra_pinned + new_blocks - self.threshold_blocks
            if over > 0:
                return NeedsEviction(over * self.block_size, "threshold")
        deficit = self.resident_blocks + new_blocks - self.capacity_blocks
        if deficit > 0:
            return NeedsEviction(deficit * self.block_size, "capacity")
        return None

    def allocate(self, request, new_tokens: int, now: float):
        """Grow ``request``'s KV by ``new_tokens`` tokens.

        Returns ``Allocation`` or ``NeedsEviction``; state is untouched on failure.
        Offline requests may not push pinned tokens over the threshold.
        """
        if new_tokens < 1:
            raise ValueError("new_tokens must be >= 1")
        if new_tokens > self.capacity_tokens:
            raise UnsatisfiableAllocation(
                f"{new_tokens} tokens requested, capacity is {self.capacity_tokens}"
            )
        tab = self.tables.get(request.id)
        if tab is None:
            self.start_request(request, now)
            tab = self.tables[request.id]
        have = request.num_computed
        need = self.blocks_for(have + new_tokens) - len(tab.blocks)
        return self.grow(request, max(need, 0), now)

    def grow(self, request, n_blocks: int, now: float, enforce_threshold: bool = True):
        tab = self.tables[request.id]
        if n_blocks <= 0:
            return Allocation(())
        fail = self.check_allocation(request, n_blocks, enforce_threshold=enforce_threshold)
        if fail is not None:
            return fail
        new = []
        for _ in range(n_blocks):
            blk = self._new_block(len(tab.blocks), now)
            self._pin(blk, tab.online)
            tab.blocks.append(blk)
            new.append(blk.id)
        return Allocation(tuple(new))

    def _index(self, node: _Node, blk: _Block) -> None:
        node.block = blk
        blk.node = node
        parent = node.parent
        if parent is not self.root:
            parent.resident_children += 1
            if parent.block is not None:
                self._refresh(parent.block)
        if blk.holders == 0:
            self._refresh(blk)

    def commit_computed(self, request, now: float) -> None:
        """Index the full blocks covered by ``request.num_computed``."""
        tab = self.tables[request.id]
        n_full = min(request.num_computed // self.block_size, len(tab.blocks))
        if len(tab.nodes) >= n_full:
            return
        toks = request.tokens()
        bs = self.block_size
        prompt_blocks = request.prompt_len // bs
        if tab.online:
            node = tab.nodes[-1] if tab.nodes else self.root
        else:
            chain = self.offline_chain(request)
        for i in range(len(tab.nodes), n_full):
            if tab.online:
                node = self._child(node, tuple(toks[i * bs:(i + 1) * bs]), True)
            else:
                node = chain[i]
            blk = tab.blocks[i]
            blk.lat = max(blk.lat, now)
            if node.block is None:
                self._index(node, blk)
            elif node.block is not blk:
                # same prefix computed elsewhere: share it and drop our copy
                shared = node.block
                self._pin(shared, tab.online)
                self._touch(shared, now)
                tab.blocks[i] = shared
                self._unpin(blk, tab.online)
                del self.blocks[blk.id]
            tab.nodes.append(node)
            node.refs += 1
            if not tab.online and tab.inflight_from is not None:
                if tab.inflight_from <= i < prompt_blocks:
                    node.inflight -= 1
        if not tab.online and tab.inflight_from is not None:
            tab.inflight_from = max(tab.inflight_from, n_full)

    def release_request(self, request, now: float) -> None:
        """Detach a finished or preempted request; its indexed blocks stay cached."""
        tab = self.tables.pop(request.id, None)
        if tab is None:
            raise KeyError(f"request {request.id} is not attached")
        if not tab.online and tab.inflight_from is not None:
            chain = self._chains.get(request.id)
            if chain is not None:
                for node in chain[tab.inflight_from:request.prompt_len // self.block_size]:
                    node.inflight -= 1
        for node in tab.nodes:
            node.refs -= 1
        for blk in tab.blocks:
            self._unpin(blk, tab.online)
            if blk.holders == 0:
                blk.lat = max(blk.lat, now)
                blk.last_online = tab.online
                if blk.node is None:
                    del self.blocks[blk.id]
                else:
                    self._online_free += self._finished_online(blk)
                    self._refresh(blk)
        for node in reversed(tab.nodes):
            if node.block is None:
                self._prune(node)

    # --------------------------------------------------------------- eviction

    def _remove(self, blk: _Block) -> None:
        self._online_free -= self._finished_online(blk)
        node = blk.node
        node.block = None
        blk.node = None
        self._unfree(blk)
        del self.blocks[blk.id]
        self.evicted_total += 1
        parent = node.parent
        if parent is not self.root:
            parent.resident_children -= 1
            if parent.block is not None:
                self._refresh(parent.block)
        self._prune(node)

    def punishable(self, block_id: int) -> bool:
        blk = self.blocks[block_id]
        return self._rc(blk) > 0 or blk.holders > 0

    def evict(self, deficit_tokens: int, now: float, exclude: Iterable[int] = ()) -> EvictionResult:
        """Free at least ``deficit_tokens`` by evicting blocks in key order.

        ``exclude`` must be closed under trie ancestors (a set of hit chains).
        """
        if deficit_tokens < 1:
            raise ValueError("deficit must be >= 1")
        n = self.blocks_for(deficit_tokens)
        victims = self.eviction_view().take(n, set(exclude))
        if victims is None:
            raise EvictionImpossible(
                f"need {n} blocks, only {len(self.eviction_view().take_all(set(exclude)))} evictable"
            )
        punish = 0
        for bid in victims:
            if self.punishable(bid):
                punish += self.block_size
            self._remove(self.blocks[bid])
        return EvictionResult(tuple(victims), punish)

    # -------------------------------------------------------------- reporting

    def occupancy_report(self) -> Occupancy:
        bs = self.block_size
        running = self.pinned_blocks
        online_free = self._online_free
        offline_free = len(self.blocks) - running - online_free
        return Occupancy(running * bs, online_free * bs, offline_free * bs)

    def occupancy_scan(self) -> Occupancy:
        """Same breakdown as ``occupancy_report`` by a full scan of the blocks."""
        running = online_free = offline_free = 0
        for blk in self.blocks.values():
            if blk.holders:
                running += 1
            elif self._class(blk) is TaskClass.FINISHED_ONLINE:
                online_free += 1
            else:
                offline_free += 1
        bs = self.block_size
        return Occupancy(running * bs, online_free * bs, offline_free * bs)

    def online_pinned_tokens(self) -> int:
        return self.online_pinned_blocks * self.block_size

    def inflight(self, node: _Node) -> bool:
        return node.inflight > 0

    def check_invariants(self) -> None:
        """Expensive consistency check used by tests."""
        assert len(self.blocks) <= self.capacity_blocks
        pinned = sum(1 for b in self.blocks.values() if b.holders)
        assert pinned == self.pinned_blocks
        assert sum(1 for b in self.blocks.values() if b.online_holders) == self.online_pinned_blocks
        stack = [self.root]
        while stack:
            node = stack.pop()
            rcnt = 0
            for ch in node.children.values():
                assert ch.parent is node
                if ch.block is not None:
                    rcnt += 1
                    assert node is self.root or node.block is not None, "residency not ancestor-closed"
                stack.append(ch)
            if node is not self.root:
                assert node.resident_children == rcnt
            if node.block is not None:
                assert node.block.node is node
                assert self.blocks.get(node.block.id) is node.block, "dangling index entry"
        for blk in self.blocks.values():
            assert blk.holders > 0 or blk.node is not None
            if self._evictable(blk):
                assert blk.in_free
        assert self._n_free == sum(1 for b in self.blocks.values() if b.in_free)
        assert self.occupancy_report() == self.occupancy_scan()


class EvictionView:
    """Non-mutating walk of the eviction order, including leaf cascades.

    Built once per planning round; victims for any root-closed exclusion set
    are a filtered prefix of the same order.
    """

    def __init__(self, cache: KVCache):
        self.cache = cache
        self._heap = list(cache._heap)  # already heap-ordered
        self._order = []  # (block_id, punishable)
        self._gone = set()
        self._child_left = {}
        self._done = False

    def _advance(self) -> bool:
        cache = self.cache
        heap = self._heap
        while heap:
            entry = heapq.heappop(heap)
            bid = entry[2]
            if bid in self._gone:
                continue
            blk = cache.blocks.get(bid)
            if blk is None:
                continue
            if entry[3] != blk.version or not blk.in_free:
                # stale, unless the block became a leaf inside this view
                if not (entry[3] == -1 and blk.holders == 0 and blk.node is not None):
                    continue
            self._gone.add(bid)
            self._order.append((bid, cache._rc(blk) > 0 or blk.holders > 0))
            parent = blk.node.parent
            if parent is not cache.root and parent.block is not None:
                left = self._child_left.get(parent, parent.resident_children) - 1
                self._child_left[parent] = left
                pb = parent.block
                if left == 0 and pb.holders == 0:
                    heapq.heappush(heap, (cache._priority(pb), pb.lat, pb.id, -1))
            return True
        self._done = True
        return False

    def take(self, n: int, exclude: set = frozenset()) -> Optional[list]:
        """First ``n`` victims not in ``exclude``, or None if too few exist."""
        if n <= 0:
            return []
        out = []
        i = 0
        while len(out) < n:
            if i == len(self._order):
                if self._done or not self._advance():
                    return None
            bid, _ = self._order[i]
            i += 1
            if bid not in exclude:
                out.append(bid)
        return out

    def take_all(self, exclude: set = frozenset()) -> list:
        while self._advance():
            pass
        return [b for b, _ in self._order if b not in exclude]

    def punishment(self, n: int, exclude: set = frozenset()) -> Optional[int]:
        victims = self.take(n, exclude)
        if victims is None:
            return None
        cache = self.cache
        pun = dict(self._order)
        return sum(cache.block_size for b in victims if pun[b])
