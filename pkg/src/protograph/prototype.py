"""Channel prototypes: peak descriptors, hierarchical k-means, contrastive losses.

Each backbone channel is summarized by where it fires: the coordinates of its
peak response, concatenated across the training images, form the channel's
descriptor.  K-means over the descriptors yields level-0 prototypes (one per
critical region); clustering the centers again, twice, yields a three-level
hierarchy.  Two contrastive losses shape a learned per-channel embedding so
the network and the clustering reinforce each other:

* the node loss pulls every element toward its own cluster center and away
  from the other same-level centers, with a per-cluster concentration value
  acting as the temperature;
* the edge loss pulls every prototype toward its parent and away from its
  same-level siblings, with a fixed temperature.

Both normalizers deliberately exclude the positive pair from the denominator,
so individual stabilized log-ratio terms can be negative; the scalar test
oracles pin the resulting signs and values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    Tensor,
    add,
    dense,
    group_mean,
    logsumexp_exclude,
    matmul,
    mean,
    normalize_rows,
    relu,
    reshape,
    scale,
    scale_rows,
    take_per_row,
    tensor_sum,
    transpose,
)

PHI_FLOOR = 1e-3  # concentration values below this are clamped in loss use
DEFAULT_ALPHA = 10.0
DEFAULT_TAU = 0.2


# ---------------------------------------------------------------------------
# peak descriptors
# ---------------------------------------------------------------------------

def peak_coordinates(features) -> np.ndarray:
    """Per channel, the (d, h, w) index of the max activation, scaled to [0,1]^3.

    Ties resolve to the first occurrence in row-major scan order, so a
    constant channel maps to (0, 0, 0).  Axes of size 1 map to coordinate 0.
    """
    arr = features.values if isinstance(features, Tensor) else np.asarray(features)
    if arr.ndim != 4 or arr.size == 0:
        raise ValueError(f"peak_coordinates expects a non-empty [C,D,H,W] array, got {arr.shape}")
    c = arr.shape[0]
    flat_idx = np.argmax(arr.reshape(c, -1), axis=1)
    coords = np.stack(np.unravel_index(flat_idx, arr.shape[1:]), axis=1).astype(np.float64)
    denom = np.maximum(np.asarray(arr.shape[1:], dtype=np.float64) - 1.0, 1.0)
    return coords / denom


@dataclass
class ChannelDescriptorTable:
    """C x 3*image_count matrix of concatenated per-image peak coordinates."""

    descriptors: np.ndarray
    image_count: int

    def validate(self) -> None:
        if self.descriptors.ndim != 2:
            raise ValueError("descriptor table must be a matrix")
        if self.descriptors.shape[1] != 3 * self.image_count:
            raise ValueError(
                f"descriptor width {self.descriptors.shape[1]} != 3*{self.image_count}")
        if self.descriptors.size and (self.descriptors.min() < 0.0 or self.descriptors.max() > 1.0):
            raise ValueError("descriptor coordinates must lie in [0,1]")


def build_descriptor_table(per_image_features) -> ChannelDescriptorTable:
    """Concatenate peak coordinates channel-wise, in the given image order."""
    blocks = [peak_coordinates(f) for f in per_image_features]
    if not blocks:
        raise ValueError("descriptor table needs at least one image")
    channels = blocks[0].shape[0]
    for i, b in enumerate(blocks):
        if b.shape[0] != channels:
            raise ValueError(f"image {i} has {b.shape[0]} channels, expected {channels}")
    table = ChannelDescriptorTable(np.concatenate(blocks, axis=1), len(blocks))
    table.validate()
    return table


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _plusplus_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:  # every remaining point coincides with a chosen center
            centers[j] = points[rng.integers(n)]
            continue
        idx = rng.choice(n, p=d2 / total)
        centers[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    return centers


def kmeans(points: np.ndarray, k: int, seed: int = 0,
           max_iter: int = 100, tol: float = 1e-10) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding, deterministic under the seed.

    Empty clusters are repaired by re-seeding from the point currently
    farthest from its assigned center; the recorded inertia history is
    non-increasing by construction.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"kmeans expects a matrix of points, got shape {points.shape}")
    n = points.shape[0]
    if k <= 0:
        raise ValueError(f"kmeans: k must be positive, got {k}")
    if k > n:
        raise ValueError(f"kmeans: k={k} exceeds the number of points ({n})")

    rng = np.random.default_rng(seed)
    centers = _plusplus_seed(points, k, rng)
    history: list[float] = []
    assignments = np.zeros(n, dtype=np.int64)

    for _ in range(max_iter):
        d2 = _squared_distances(points, centers)
        assignments = np.argmin(d2, axis=1)
        point_cost = d2[np.arange(n), assignments]
        history.append(float(point_cost.sum()))

        new_centers = centers.copy()
        counts = np.bincount(assignments, minlength=k)
        for j in range(k):
            if counts[j] > 0:
                new_centers[j] = points[assignments == j].mean(axis=0)
        repaired = False
        if np.any(counts == 0):
            takeable = point_cost.copy()
            for j in np.flatnonzero(counts == 0):
                far = int(np.argmax(takeable))
                new_centers[j] = points[far]
                takeable[far] = -1.0
                repaired = True
        shift = float(np.max(np.sqrt(np.sum((new_centers - centers) ** 2, axis=1))))
        centers = new_centers
        if not repaired and shift < tol:
            break

    d2 = _squared_distances(points, centers)
    assignments = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(n), assignments].sum())
    history.append(inertia)
    return KMeansResult(assignments, centers, inertia, history)


# ---------------------------------------------------------------------------
# hierarchy
# ---------------------------------------------------------------------------

@dataclass
class PrototypeHierarchy:
    """Three nested clustering levels: level 0 partitions channels, each
    further level partitions the centers of the level below."""

    counts: tuple[int, ...]
    memberships: list[np.ndarray]   # memberships[l] assigns level-l items to clusters
    centers: list[np.ndarray]       # centers[l] has shape (counts[l], dim)
    phi: list[np.ndarray]           # concentration per cluster, per level
    space: str = "descriptor"       # which vectors the centers currently live in
    channel_coords: np.ndarray | None = None  # (C,3) mean peak coordinate per channel

    @property
    def num_levels(self) -> int:
        return len(self.counts)

    def parents(self, level: int) -> np.ndarray:
        """Cluster index at level+1 of each level-``level`` center."""
        if level >= self.num_levels - 1:
            raise ValueError(f"level {level} prototypes have no parents")
        return self.memberships[level + 1]

    def validate(self) -> None:
        if self.num_levels != 3:
            raise ValueError(f"hierarchy must have 3 levels, got {self.num_levels}")
        if any(a <= b for a, b in zip(self.counts, self.counts[1:])):
            raise ValueError(f"hierarchy counts must be strictly decreasing, got {self.counts}")
        for l, (m, k) in enumerate(zip(self.memberships, self.counts)):
            if np.any(m < 0) or np.any(m >= k):
                raise ValueError(f"level {l} assignment out of range")
            if np.bincount(m, minlength=k).min() == 0:
                raise ValueError(f"level {l} has an empty cluster")
            if l > 0 and m.shape[0] != self.counts[l - 1]:
                raise ValueError(
                    f"level {l} must partition the {self.counts[l - 1]} centers below it")
        for l in range(self.num_levels):
            if self.centers[l].shape[0] != self.counts[l]:
                raise ValueError(f"level {l} center count mismatch")
            if self.phi[l].shape != (self.counts[l],):
                raise ValueError(f"level {l} phi count mismatch")

    def to_dict(self) -> dict:
        return {
            "counts": list(self.counts),
            "space": self.space,
            "memberships": [m.tolist() for m in self.memberships],
            "centers": [c.tolist() for c in self.centers],
            "phi": [p.tolist() for p in self.phi],
            "channel_coords": None if self.channel_coords is None
                              else self.channel_coords.tolist(),
        }

    @staticmethod
    def from_dict(doc: dict) -> "PrototypeHierarchy":
        return PrototypeHierarchy(
            counts=tuple(doc["counts"]),
            memberships=[np.asarray(m, dtype=np.int64) for m in doc["memberships"]],
            centers=[np.asarray(c, dtype=np.float64) for c in doc["centers"]],
            phi=[np.asarray(p, dtype=np.float64) for p in doc["phi"]],
            space=doc["space"],
            channel_coords=None if doc.get("channel_coords") is None
                           else np.asarray(doc["channel_coords"], dtype=np.float64),
        )


def concentration_phi(members: np.ndarray, center: np.ndarray,
                      alpha: float = DEFAULT_ALPHA) -> float:
    """Mean member-center distance, damped by log(cluster size + alpha)."""
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    if members.shape[0] == 0:
        raise ValueError("concentration of an empty cluster is undefined")
    center = np.asarray(center, dtype=np.float64)
    dist = np.sqrt(np.sum((members - center[None, :]) ** 2, axis=1))
    m = members.shape[0]
    return float(dist.sum() / (m * math.log(m + alpha)))


def _level_phi(points: np.ndarray, assignments: np.ndarray, centers: np.ndarray,
               alpha: float) -> np.ndarray:
    return np.array([
        concentration_phi(points[assignments == j], centers[j], alpha)
        for j in range(centers.shape[0])
    ])


def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key))
               .generate_state(1)[0])


def build_hierarchy(table, counts=(16, 8, 4), seed: int = 0,
                    alpha: float = DEFAULT_ALPHA) -> PrototypeHierarchy:
    """Cluster channel descriptors into nested prototype levels.

    Rows are clustered in a canonical (lexicographically sorted) order, so a
    permutation of the channels yields the same partition up to relabeling.
    """
    if isinstance(table, ChannelDescriptorTable):
        points = table.descriptors
        image_count = table.image_count
    else:
        points = np.asarray(table, dtype=np.float64)
        image_count = None
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3:
        raise ValueError(f"expected 3 level counts, got {counts}")
    if any(a <= b for a, b in zip(counts, counts[1:])) or counts[-1] < 1:
        raise ValueError(f"hierarchy counts must be strictly decreasing, got {counts}")
    if counts[0] > points.shape[0]:
        raise ValueError(
            f"cannot form {counts[0]} level-0 clusters from {points.shape[0]} channels")

    order = np.lexsort(points.T[::-1])  # canonical row order
    level0 = kmeans(points[order], counts[0], seed=_derived_seed(seed, 0))
    assign0 = np.empty(points.shape[0], dtype=np.int64)
    assign0[order] = level0.assignments

    level1 = kmeans(level0.centers, counts[1], seed=_derived_seed(seed, 1))
    level2 = kmeans(level1.centers, counts[2], seed=_derived_seed(seed, 2))

    memberships = [assign0, level1.assignments, level2.assignments]
    centers = [level0.centers, level1.centers, level2.centers]
    phi = [
        _level_phi(points, assign0, level0.centers, alpha),
        _level_phi(level0.centers, level1.assignments, level1.centers, alpha),
        _level_phi(level1.centers, level2.assignments, level2.centers, alpha),
    ]
    coords = None
    if image_count:
        coords = points.reshape(points.shape[0], image_count, 3).mean(axis=1)
    hierarchy = PrototypeHierarchy(counts, memberships, centers, phi,
                                   space="descriptor", channel_coords=coords)
    hierarchy.validate()
    return hierarchy


def refresh_hierarchy(item_vectors: np.ndarray, previous: PrototypeHierarchy,
                      seed: int = 0, alpha: float = DEFAULT_ALPHA) -> PrototypeHierarchy:
    """Re-cluster from current per-channel vectors, keeping counts and coords."""
    refreshed = build_hierarchy(np.asarray(item_vectors, dtype=np.float64),
                                counts=previous.counts, seed=seed, alpha=alpha)
    return replace(refreshed, space="embedding", channel_coords=previous.channel_coords)


def _normalized_group_means(vectors: np.ndarray, assignments: np.ndarray,
                            n_groups: int) -> np.ndarray:
    sums = np.zeros((n_groups, vectors.shape[1]))
    np.add.at(sums, assignments, vectors)
    counts = np.bincount(assignments, minlength=n_groups)[:, None]
    means = sums / counts
    norms = np.sqrt(np.sum(means * means, axis=1, keepdims=True))
    return np.where(norms > 1e-8, means / np.where(norms > 1e-8, norms, 1.0), 0.0)


def rebase_statistics(hierarchy: PrototypeHierarchy, item_vectors: np.ndarray,
                      alpha: float = DEFAULT_ALPHA) -> PrototypeHierarchy:
    """Recompute centers and concentrations in a new vector space, keeping the
    memberships.  Used when the descriptor-built hierarchy starts driving the
    embedding-space losses."""
    vectors = np.asarray(item_vectors, dtype=np.float64)
    centers, phi = [], []
    items = vectors
    for l in range(hierarchy.num_levels):
        c = _normalized_group_means(items, hierarchy.memberships[l], hierarchy.counts[l])
        centers.append(c)
        phi.append(_level_phi(items, hierarchy.memberships[l], c, alpha))
        items = c
    return replace(hierarchy, centers=centers, phi=phi, space="embedding")


# ---------------------------------------------------------------------------
# contrastive losses
# ---------------------------------------------------------------------------

@dataclass
class NodeLossLevel:
    """One level's inputs to the node loss: the clustered items, their
    cluster assignments, and per-cluster centers/concentrations."""

    elements: Tensor
    assignments: np.ndarray
    centers: Tensor
    phi: np.ndarray


def loss_node(levels: list[NodeLossLevel]) -> Tensor:
    """Separation loss over all levels; see the module docstring for the form.

    Per element u in cluster n: -log of exp(u.c_n/phi_n) over the sum of
    exp(u.c_i/phi_n) for i != n, averaged with a -1/L prefactor over levels.
    Centers and phi enter as given (no gradient through them); gradients reach
    the elements.
    """
    if not levels:
        raise ValueError("loss_node: need at least one level")
    total = None
    for lv in levels:
        n_clusters = lv.centers.shape[0]
        if n_clusters < 2:
            raise ValueError("loss_node: every level needs at least 2 clusters")
        phi = np.asarray(lv.phi, dtype=np.float64)
        if np.any(phi <= 0.0):
            raise ValueError("loss_node: non-positive concentration; apply the floor first")
        assignments = np.asarray(lv.assignments, dtype=np.int64)
        scores = matmul(lv.elements, transpose(lv.centers))
        scores = scale_rows(scores, Tensor(1.0 / phi[assignments]))
        ratio = add(take_per_row(scores, assignments),
                    scale(logsumexp_exclude(scores, assignments), -1.0))
        term = tensor_sum(ratio)
        total = term if total is None else add(total, term)
    return scale(total, -1.0 / len(levels))


@dataclass
class EdgeLossLevel:
    """One non-top level's inputs to the edge loss."""

    prototypes: Tensor        # (n_l, E)
    parent_index: np.ndarray  # (n_l,) cluster index into parent_prototypes
    parent_prototypes: Tensor


def loss_edge(levels: list[EdgeLossLevel], tau: float = DEFAULT_TAU,
              num_levels: int | None = None) -> Tensor:
    """Parent-affinity loss: each prototype against its parent over its
    same-level siblings, with a -1/num_levels prefactor (num_levels counts
    the full hierarchy, one more than the levels that carry parents)."""
    if not levels:
        raise ValueError("loss_edge: need at least one level with parents")
    if num_levels is None:
        num_levels = len(levels) + 1
    if tau <= 0.0:
        raise ValueError(f"loss_edge: temperature must be positive, got {tau}")
    total = None
    for lv in levels:
        n = lv.prototypes.shape[0]
        if n < 2:
            raise ValueError("loss_edge: every non-top level needs at least 2 prototypes")
        parent_index = np.asarray(lv.parent_index, dtype=np.int64)
        if parent_index.shape != (n,):
            raise ValueError(f"loss_edge: expected {n} parent links, got {parent_index.shape}")
        if np.any(parent_index < 0) or np.any(parent_index >= lv.parent_prototypes.shape[0]):
            raise ValueError("loss_edge: parent link out of range")
        sib = scale(matmul(lv.prototypes, transpose(lv.prototypes)), 1.0 / tau)
        par = scale(matmul(lv.prototypes, transpose(lv.parent_prototypes)), 1.0 / tau)
        ratio = add(take_per_row(par, parent_index),
                    scale(logsumexp_exclude(sib, np.arange(n)), -1.0))
        term = tensor_sum(ratio)
        total = term if total is None else add(total, term)
    return scale(total, -1.0 / num_levels)


def _floored(phi: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(phi, dtype=np.float64), PHI_FLOOR)


def hierarchy_node_loss(hierarchy: PrototypeHierarchy, embeddings: Tensor) -> Tensor:
    """Node loss over the full hierarchy for one volume's channel embeddings.

    Level-0 elements are the (differentiable) embeddings; the centers are the
    current cluster means of those same embeddings, detached, so prototypes
    act as constants within the step.  Higher levels consist entirely of
    detached centers and contribute value but no gradient.
    """
    e = embeddings.values
    c0 = _normalized_group_means(e, hierarchy.memberships[0], hierarchy.counts[0])
    c1 = _normalized_group_means(c0, hierarchy.memberships[1], hierarchy.counts[1])
    c2 = _normalized_group_means(c1, hierarchy.memberships[2], hierarchy.counts[2])
    levels = [
        NodeLossLevel(embeddings, hierarchy.memberships[0], Tensor(c0),
                      _floored(hierarchy.phi[0])),
        NodeLossLevel(Tensor(c0), hierarchy.memberships[1], Tensor(c1),
                      _floored(hierarchy.phi[1])),
        NodeLossLevel(Tensor(c1), hierarchy.memberships[2], Tensor(c2),
                      _floored(hierarchy.phi[2])),
    ]
    return loss_node(levels)


def hierarchy_edge_loss(hierarchy: PrototypeHierarchy, embeddings: Tensor,
                        tau: float = DEFAULT_TAU) -> Tensor:
    """Edge loss with centers rebuilt differentiably from the embeddings, so
    parent-affinity gradients reach the network."""
    c0 = normalize_rows(group_mean(embeddings, hierarchy.memberships[0],
                                   hierarchy.counts[0]))
    c1 = normalize_rows(group_mean(c0, hierarchy.memberships[1], hierarchy.counts[1]))
    c2 = normalize_rows(group_mean(c1, hierarchy.memberships[2], hierarchy.counts[2]))
    levels = [
        EdgeLossLevel(c0, hierarchy.parents(0), c1),
        EdgeLossLevel(c1, hierarchy.parents(1), c2),
    ]
    return loss_edge(levels, tau=tau, num_levels=hierarchy.num_levels)


# ---------------------------------------------------------------------------
# cluster features and the projection head
# ---------------------------------------------------------------------------

def cluster_features(features: Tensor, assignments: np.ndarray, n_clusters: int) -> Tensor:
    """Per-cluster mean of the channel feature maps: [C,D,H,W] -> [N,D,H,W]."""
    return group_mean(features, assignments, n_clusters)


@dataclass
class ProjectionParams:
    """Shared two-layer pointwise head mapping each channel to an embedding.

    Both layers are 1x1x1 convolutions on a single-channel view, i.e. the
    same tiny per-voxel network is applied to every channel's activations;
    the spatial mean of its output, L2-normalized, is the channel embedding.
    """

    hidden_w: Tensor
    hidden_b: Tensor
    out_w: Tensor
    out_b: Tensor

    @property
    def embed_dim(self) -> int:
        return self.out_w.shape[0]


def init_projection(hidden: int, embed_dim: int, rng: np.random.Generator) -> ProjectionParams:
    return ProjectionParams(
        hidden_w=Tensor(rng.normal(0.0, np.sqrt(2.0), size=(hidden, 1)), requires_grad=True),
        hidden_b=Tensor(np.zeros(hidden), requires_grad=True),
        out_w=Tensor(rng.normal(0.0, np.sqrt(2.0 / hidden), size=(embed_dim, hidden)),
                     requires_grad=True),
        out_b=Tensor(np.zeros(embed_dim), requires_grad=True),
    )


def project_embeddings(features: Tensor, params: ProjectionParams) -> Tensor:
    """Channel embeddings: per-voxel two-layer map, spatial mean, unit norm.

    Returns a (C, embed_dim) tensor; an all-zero channel comes back as a zero
    row that takes no gradient this step (see ``normalize_rows``).
    """
    c = features.shape[0]
    voxels = int(np.prod(features.shape[1:]))
    flat = reshape(features, (c * voxels, 1))
    hidden = relu(dense(flat, params.hidden_w, params.hidden_b))
    out = dense(hidden, params.out_w, params.out_b)
    per_channel = mean(reshape(out, (c, voxels, params.embed_dim)), axes=(1,))
    return normalize_rows(per_channel)


def projection_param_list(params: ProjectionParams) -> list[tuple[str, Tensor]]:
    return [("proj.hidden_w", params.hidden_w), ("proj.hidden_b", params.hidden_b),
            ("proj.out_w", params.out_w), ("proj.out_b", params.out_b)]
