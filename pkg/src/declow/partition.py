"""Per-node datasets with a controllable degree of label skew.

skew interpolates between the IID endpoint (0: every class spread uniformly
over the nodes) and fully disjoint classes (1: each class lives only on its
dominant node). Classes are assigned to dominant nodes round-robin, and each
sample routes to its class's dominant node with probability
skew + (1 - skew)/n, to every other node with probability (1 - skew)/n.
"""

from dataclasses import dataclass

import numpy as np

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR_CLASSES = 10


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (N, ...) float64
    labels: np.ndarray  # (N,) int class ids

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("feature count != label count")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices])


@dataclass(frozen=True)
class PartitionPlan:
    skew: float
    seed: int
    assignments: list  # per node: np.ndarray of sample indices

    @property
    def n(self) -> int:
        return len(self.assignments)

    def to_csv(self) -> str:
        lines = ["node,sample_index"]
        for node, idx in enumerate(self.assignments):
            lines.extend(f"{node},{i}" for i in idx)
        return "\n".join(lines) + "\n"


def generate_blobs(
    classes: int, per_class: int, dim: int, separation: float, seed: int
) -> Dataset:
    """Gaussian clusters with unit covariance and well-separated means."""
    if classes < 2 or per_class < 1:
        raise ValueError("need classes >= 2 and per_class >= 1")
    rng = np.random.default_rng(seed)
    means = rng.normal(scale=separation, size=(classes, dim))
    # redraw any mean that crowds an earlier one; terminates fast at this scale
    for c in range(1, classes):
        for _ in range(1000):
            dists = np.linalg.norm(means[:c] - means[c], axis=1)
            if dists.min() >= separation:
                break
            means[c] = rng.normal(scale=separation, size=dim)
        else:
            raise RuntimeError("could not separate class means")
    features = np.concatenate(
        [means[c] + rng.normal(size=(per_class, dim)) for c in range(classes)]
    )
    labels = np.repeat(np.arange(classes), per_class)
    order = rng.permutation(classes * per_class)
    return Dataset(features[order], labels[order])


def dominant_node(cls: int, n: int) -> int:
    return cls % n


def partition_skewed(
    labels: np.ndarray, n: int, skew: float, seed: int
) -> PartitionPlan:
    """Route each sample to a node under the dominant-node rule above."""
    if not 0.0 <= skew <= 1.0:
        raise ValueError(f"skew must be in [0, 1], got {skew}")
    if n < 1:
        raise ValueError("need at least one node")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    u = rng.random(labels.shape[0])
    # probability mass: dominant node gets skew + (1-skew)/n, the rest (1-skew)/n
    base = (1.0 - skew) / n
    doms = labels.astype(np.int64) % n
    if base > 0.0 and n > 1:
        slot = np.floor((u - skew - base) / base).astype(np.int64)
        slot = np.clip(slot, 0, n - 2)
        other = np.where(slot < doms, slot, slot + 1)  # skip the dominant node
    else:
        other = doms
    nodes = np.where(u < skew + base, doms, other)
    assignments = [np.nonzero(nodes == node)[0] for node in range(n)]
    return PartitionPlan(skew=skew, seed=seed, assignments=assignments)


def load_cifar10_binary(path) -> Dataset:
    """CIFAR-10 binary batch: 3073-byte records, channel-major R/G/B pixels.

    Pixels are scaled to [0, 1] and then standardized per channel with the
    file's own statistics.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
        raise ValueError(
            f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if (labels >= CIFAR_CLASSES).any():
        raise ValueError(f"{path}: label byte >= {CIFAR_CLASSES}")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    mean = pixels.mean(axis=(0, 2, 3), keepdims=True)
    std = pixels.std(axis=(0, 2, 3), keepdims=True)
    std[std == 0] = 1.0
    return Dataset((pixels - mean) / std, labels)


def flip_horizontal(features: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Augmentation hook: random horizontal flip for (N, C, H, W) batches."""
    flip = rng.random(features.shape[0]) < 0.5
    out = features.copy()
    out[flip] = out[flip][..., ::-1]
    return out
