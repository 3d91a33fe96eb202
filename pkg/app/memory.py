"""
Embedding Memory
FIFO memories of unit-norm embeddings and Self-Organizing Prototype construction
"""
import logging
import threading
from dataclasses import dataclass
from enum import Enum

import numpy as np

from app.exceptions import DimMismatch, KExceedsFill, KTooLargeForBank
from app.numerics import get_dtype, rowwise_l2_normalize, topk_rowwise

logger = logging.getLogger(__name__)


class ContributionKind(str, Enum):
    ONE_HOT = 'one_hot'
    SMOOTHED = 'smoothed'
    SIMILARITY = 'similarity'


@dataclass(frozen=True)
class ContributionMode:
    """How SOP members distribute their softmax mass over anchors"""
    kind: ContributionKind
    smoothing: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError(f"smoothing must be in [0, 1), got {self.smoothing}")

    @classmethod
    def one_hot(cls):
        return cls(ContributionKind.ONE_HOT, 0.0)

    @classmethod
    def smoothed(cls, s):
        return cls(ContributionKind.SMOOTHED, float(s))

    @classmethod
    def similarity_soft(cls, s):
        return cls(ContributionKind.SIMILARITY, float(s))

    @classmethod
    def parse(cls, name, s=0.0):
        """Build a mode from its config name: one_hot | smoothed | similarity"""
        kind = ContributionKind(name)
        if kind is ContributionKind.ONE_HOT:
            return cls.one_hot()
        return cls(kind, float(s))


@dataclass
class SopSet:
    """
    One sampling of Self-Organizing Prototypes

    Members are stacked anchor-major: rows i*(k+1) ... i*(k+1)+k of D belong
    to anchor i, and the first of them is the anchor itself.
    """
    num_anchors: int
    members_per_sop: int
    D: np.ndarray
    Y: np.ndarray
    anchor_indices: np.ndarray
    member_indices: np.ndarray
    member_scores: np.ndarray


def contribution_matrix(num_anchors, members_per_sop, member_scores, mode):
    """
    Row-stochastic map from SOP members to anchors

    Args:
        num_anchors (int): K
        members_per_sop (int): k + 1
        member_scores (ndarray): K x (k+1) cosine similarities to the owning anchor
        mode (ContributionMode): contribution model

    Returns:
        ndarray: K(k+1) x K matrix whose rows sum to 1
    """
    rows = num_anchors * members_per_sop
    owner = np.repeat(np.arange(num_anchors), members_per_sop)
    if num_anchors == 1:
        return np.ones((rows, 1), dtype=get_dtype())

    s = mode.smoothing
    if mode.kind is ContributionKind.ONE_HOT:
        Y = np.zeros((rows, num_anchors), dtype=np.float64)
        Y[np.arange(rows), owner] = 1.0
    elif mode.kind is ContributionKind.SMOOTHED:
        Y = np.full((rows, num_anchors), s / (num_anchors - 1.0), dtype=np.float64)
        Y[np.arange(rows), owner] = 1.0 - s
    else:
        scores = np.clip(np.asarray(member_scores, dtype=np.float64).reshape(-1), 0.0, 1.0)
        owner_weight = (1.0 - s) * scores
        owner_weight[::members_per_sop] = 1.0 - s
        spread = (1.0 - owner_weight) / (num_anchors - 1.0)
        Y = np.repeat(spread[:, None], num_anchors, axis=1)
        Y[np.arange(rows), owner] = owner_weight
    return Y.astype(get_dtype())


class MemoryBank:
    """Fixed-capacity FIFO ring of unit-norm embeddings"""

    def __init__(self, capacity, dim, storage, cursor=0, filled=None):
        self.capacity = capacity
        self.dim = dim
        self.storage = storage
        self.cursor = cursor
        self.filled = capacity if filled is None else filled
        self._lock = threading.RLock()

    def __repr__(self):
        return f'<MemoryBank {self.capacity}x{self.dim} cursor={self.cursor}>'

    def push(self, rows):
        """
        Normalize rows and write them at the cursor, oldest entries first out

        Args:
            rows: n x dim embeddings (need not be normalized)

        Returns:
            MemoryBank: self, updated in place
        """
        rows = np.atleast_2d(np.asarray(rows, dtype=self.storage.dtype))
        if rows.shape[1] != self.dim:
            raise DimMismatch(f"bank has dim {self.dim}, rows have {rows.shape[1]}")
        rows = rowwise_l2_normalize(rows).astype(self.storage.dtype, copy=False)
        n = rows.shape[0]

        with self._lock:
            positions = (self.cursor + np.arange(n)) % self.capacity
            if n > self.capacity:
                rows = rows[-self.capacity:]
                positions = positions[-self.capacity:]
            self.storage[positions] = rows
            self.cursor = int((self.cursor + n) % self.capacity)
            self.filled = min(self.capacity, self.filled + n)
        return self

    def ordered(self):
        """Stored rows from oldest to newest"""
        with self._lock:
            if self.filled < self.capacity:
                return self.storage[:self.filled].copy()
            return np.roll(self.storage, -self.cursor, axis=0)

    def sample_anchors(self, K, rng):
        """K distinct bank indices, uniform without replacement"""
        if K > self.filled:
            raise KExceedsFill(f"requested {K} anchors from a bank holding {self.filled}")
        return np.asarray(rng.choice(self.filled, size=K, replace=False), dtype=np.int64)

    def build_sop(self, anchor_indices, k, mode):
        """
        Build one SOP set: for each anchor, its top-(k+1) cosine neighbours

        The anchor always ranks first within its own SOP. Members may be
        shared between SOPs.

        Args:
            anchor_indices: K bank indices
            k (int): extra support embeddings per anchor
            mode (ContributionMode): contribution model for Y

        Returns:
            SopSet
        """
        anchor_indices = np.asarray(anchor_indices, dtype=np.int64)
        if k + 1 > self.filled:
            raise KTooLargeForBank(f"k+1={k + 1} exceeds bank fill {self.filled}")
        K = len(anchor_indices)

        with self._lock:
            pool = self.storage[:self.filled].copy()

        anchors = pool[anchor_indices]
        sims = anchors @ pool.T
        search = sims.copy()
        search[np.arange(K), anchor_indices] = np.inf
        _, member_indices = topk_rowwise(search, k + 1)
        member_scores = np.take_along_axis(sims, member_indices, axis=1)

        return SopSet(
            num_anchors=K,
            members_per_sop=k + 1,
            D=pool[member_indices.reshape(-1)],
            Y=contribution_matrix(K, k + 1, member_scores, mode),
            anchor_indices=anchor_indices,
            member_indices=member_indices,
            member_scores=member_scores,
        )

    def state_dict(self):
        return {'storage': self.storage, 'cursor': self.cursor, 'filled': self.filled}

    def load_state_dict(self, state):
        storage = np.asarray(state['storage'], dtype=self.storage.dtype)
        if storage.shape != (self.capacity, self.dim):
            raise DimMismatch(f"bank dump has shape {storage.shape}, expected {(self.capacity, self.dim)}")
        with self._lock:
            self.storage = storage.copy()
            self.cursor = int(state['cursor'])
            self.filled = int(state['filled'])


def init_bank(capacity, dim, seed):
    """
    Create a full bank of random unit-norm rows (usable from step 0)

    Args:
        capacity (int): number of rows (N_C or N_p)
        dim (int): embedding width d
        seed: anything accepted by numpy.random.default_rng
    """
    if capacity < 1 or dim < 1:
        raise ValueError("capacity and dim must be at least 1")
    rng = np.random.default_rng(seed)
    storage = rng.standard_normal((capacity, dim)).astype(get_dtype())
    storage = rowwise_l2_normalize(storage).astype(get_dtype(), copy=False)
    logger.debug("initialized memory bank %dx%d", capacity, dim)
    return MemoryBank(capacity, dim, storage)
