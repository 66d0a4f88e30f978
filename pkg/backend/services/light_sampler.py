"""
Adaptive light sampler
Binary tree over light indices; nodes store gathered-photon counts and leaves
split once their count passes the branch threshold.
"""

from typing import List, Tuple

import numpy as np

from services.error_handler import GuidingError, get_logger

logger = get_logger(__name__)

DEFAULT_BRANCH_THRESHOLD = 64
DEFAULT_PRIOR = 1.0
DECAY = 0.5


class LightTree:
    """
    Nodes live in parallel lists; node i covers lights [lo[i], hi[i]).
    Children partition the parent range into halves, left child gets the first half.
    """

    def __init__(
        self,
        num_lights: int,
        branch_threshold: int = DEFAULT_BRANCH_THRESHOLD,
        prior: float = DEFAULT_PRIOR,
        update: str = "decay",
        initial_depth: int = 0,
    ):
        if num_lights < 1:
            raise GuidingError("Light tree needs at least one light")
        if prior <= 0.0:
            raise GuidingError("Light tree prior must be positive")
        if update not in ("decay", "replace"):
            raise GuidingError(f"Unknown light tree update mode '{update}'")
        self.num_lights = int(num_lights)
        self.branch_threshold = int(branch_threshold)
        self.prior = float(prior)
        self.update = update

        self.lo: List[int] = [0]
        self.hi: List[int] = [self.num_lights]
        self.count: List[float] = [0.0]
        self.left: List[int] = [-1]
        self.right: List[int] = [-1]

        for _ in range(initial_depth):
            for leaf in self.leaves():
                self._split(leaf)

    def __len__(self) -> int:
        return len(self.lo)

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    def leaves(self) -> List[int]:
        return [i for i in range(len(self)) if self.is_leaf(i)]

    def _split(self, node: int) -> bool:
        lo, hi = self.lo[node], self.hi[node]
        if hi - lo < 2 or not self.is_leaf(node):
            return False
        mid = lo + (hi - lo + 1) // 2
        half = self.count[node] * 0.5
        for a, b in ((lo, mid), (mid, hi)):
            self.lo.append(a)
            self.hi.append(b)
            self.count.append(half)
            self.left.append(-1)
            self.right.append(-1)
        self.left[node] = len(self) - 2
        self.right[node] = len(self) - 1
        return True

    def _check(self, light_index: int) -> int:
        i = int(light_index)
        if not 0 <= i < self.num_lights:
            raise GuidingError(f"Light index {light_index} outside [0, {self.num_lights})")
        return i

    def _path(self, light_index: int) -> List[int]:
        node, path = 0, [0]
        while not self.is_leaf(node):
            node = self.left[node] if light_index < self.hi[self.left[node]] else self.right[node]
            path.append(node)
        return path

    def _p_left(self, node: int) -> float:
        cl = self.count[self.left[node]] + self.prior
        cr = self.count[self.right[node]] + self.prior
        return cl / (cl + cr)

    def sample_light(self, u: float) -> Tuple[int, float]:
        """Descends by (count + prior); u is reused by rescaling at every branch"""
        u = float(u)
        if not 0.0 <= u < 1.0:
            raise GuidingError(f"Light sample u must lie in [0, 1), got {u}")
        node, p = 0, 1.0
        while not self.is_leaf(node):
            pl = self._p_left(node)
            if u < pl:
                u = u / pl
                node = self.left[node]
                p *= pl
            else:
                u = (u - pl) / (1.0 - pl)
                node = self.right[node]
                p *= 1.0 - pl
            u = min(u, np.nextafter(1.0, 0.0))
        size = self.hi[node] - self.lo[node]
        k = min(int(u * size), size - 1)
        return self.lo[node] + k, p / size

    def pmf(self, light_index: int) -> float:
        i = self._check(light_index)
        p = 1.0
        path = self._path(i)
        for parent, child in zip(path[:-1], path[1:]):
            pl = self._p_left(parent)
            p *= pl if child == self.left[parent] else 1.0 - pl
        leaf = path[-1]
        return p / (self.hi[leaf] - self.lo[leaf])

    def pmfs(self) -> np.ndarray:
        return np.array([self.pmf(i) for i in range(self.num_lights)])

    def sample_lights(self, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Vectorized sample_light through the per-light pmf table"""
        pm = self.pmfs()
        cdf = np.cumsum(pm)
        idx = np.minimum(np.searchsorted(cdf, np.asarray(u) * cdf[-1], side="right"), self.num_lights - 1)
        return idx, pm[idx]

    def record(self, light_index: int, gathered: float) -> None:
        """Adds gathered to every node on the root-to-leaf path of the light"""
        i = self._check(light_index)
        if gathered < 0:
            raise GuidingError("Gathered count must be nonnegative")
        for node in self._path(i):
            self.count[node] += gathered

    def begin_iteration(self) -> None:
        """Ages the counts before this iteration's records: x0.5 (decay) or reset (replace)"""
        factor = DECAY if self.update == "decay" else 0.0
        self.count = [c * factor for c in self.count]

    def refine(self) -> int:
        """Splits every leaf whose count passes the threshold; returns the number of splits"""
        splits = 0
        for leaf in self.leaves():
            if self.count[leaf] > self.branch_threshold and self._split(leaf):
                splits += 1
        if splits:
            logger.debug(f"Light tree refined: {splits} splits, {len(self)} nodes")
        return splits


class UniformLightSampler(LightTree):
    """Root-only tree that never records or splits (uniform light selection)"""

    def record(self, light_index: int, gathered: float) -> None:
        self._check(light_index)

    def refine(self) -> int:
        return 0
