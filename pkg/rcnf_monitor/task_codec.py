"""Task codebook - maximally separated task embeddings on a hypersphere.

Each task id maps to a point of norm R in R^T (T = window length). The points
are spread by Riemannian gradient descent on the Riesz s-energy
    E = Σ_{i<j} ‖v_i − v_j‖^(−s),   s = 1,
with every step projected onto the sphere's tangent space and renormalized.
The broadcast of a task's vector over the (T, N, 2) latent is the flow's prior
mean: coordinate t of τ fills frame t.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .artifacts import read_json, write_json
from .const import (
    CODEBOOK_FORMAT_VERSION,
    CODEBOOK_ITERATIONS,
    CODEBOOK_STEP_SIZE,
    NORM_TOLERANCE,
    RIESZ_EXPONENT,
)
from .exceptions import (
    InvalidDimensionsError,
    RCNFValidationError,
    ShapeMismatchError,
    UnknownTaskError,
)

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TaskEmbedding:
    task_id: str
    vector: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        vector = np.array(self.vector, dtype=np.float64)
        vector.setflags(write=False)
        object.__setattr__(self, "vector", vector)
        if self.radius == 0.0:
            # null embedding (task conditioning ablated)
            if np.any(vector):
                raise RCNFValidationError("A radius-0 embedding must be the zero vector")
            return
        norm = float(np.linalg.norm(vector))
        if abs(norm - self.radius) > NORM_TOLERANCE * self.radius:
            raise RCNFValidationError(
                f"Embedding {self.task_id!r} has norm {norm:.9g}, expected {self.radius}"
            )

    @classmethod
    def null(cls, task_id: str, T: int) -> "TaskEmbedding":
        return cls(task_id, np.zeros(T), 0.0)

    @property
    def T(self) -> int:
        return int(self.vector.shape[0])


@dataclass(frozen=True, eq=False)
class TaskCodebook:
    """Immutable ordered set of task embeddings sharing T and R."""

    embeddings: tuple[TaskEmbedding, ...]
    T: int
    R: float
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "embeddings", tuple(self.embeddings))
        ids = [emb.task_id for emb in self.embeddings]
        if len(set(ids)) != len(ids):
            raise RCNFValidationError(f"Duplicate task ids in codebook: {ids}")
        for emb in self.embeddings:
            if emb.T != self.T:
                raise ShapeMismatchError(
                    f"Embedding {emb.task_id!r} has length {emb.T}, codebook T={self.T}"
                )
        vectors = self.matrix()
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                if np.array_equal(vectors[i], vectors[j]):
                    raise RCNFValidationError(
                        f"Tasks {ids[i]!r} and {ids[j]!r} share an embedding"
                    )
        object.__setattr__(self, "_index", {task_id: i for i, task_id in enumerate(ids)})

    @property
    def task_ids(self) -> list[str]:
        return [emb.task_id for emb in self.embeddings]

    @property
    def min_pairwise_angle(self) -> float:
        """Smallest angle (degrees) between any two vectors."""
        return min_pairwise_angle(self.matrix())

    def __len__(self) -> int:
        return len(self.embeddings)

    def __contains__(self, task_id: object) -> bool:
        return task_id in self._index

    def matrix(self) -> np.ndarray:
        if not self.embeddings:
            return np.zeros((0, self.T))
        return np.stack([emb.vector for emb in self.embeddings])

    def vectors_for(self, task_ids: Sequence[str]) -> np.ndarray:
        """(B, T) array of the vectors of ``task_ids``, in order."""
        return np.stack([embed_task(self, task_id).vector for task_id in task_ids])

    def to_dict(self) -> dict:
        return {
            "format_version": CODEBOOK_FORMAT_VERSION,
            "T": self.T,
            "R": self.R,
            "tasks": [
                {"id": emb.task_id, "vector": emb.vector.tolist()}
                for emb in self.embeddings
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TaskCodebook":
        try:
            T = int(data["T"])
            R = float(data["R"])
            tasks = data["tasks"]
        except (KeyError, TypeError, ValueError) as err:
            raise RCNFValidationError(f"Malformed codebook document: {err}") from err
        return cls(
            embeddings=tuple(
                TaskEmbedding(task["id"], np.asarray(task["vector"], dtype=np.float64), R)
                for task in tasks
            ),
            T=T,
            R=R,
        )


def min_pairwise_angle(vectors: np.ndarray) -> float:
    """Exhaustive pairwise angle scan, degrees."""
    if len(vectors) < 2:
        return 180.0
    units = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    gram = np.clip(units @ units.T, -1.0, 1.0)
    upper = gram[np.triu_indices(len(units), k=1)]
    return float(np.degrees(np.arccos(upper.max())))


def _riesz_direction(points: np.ndarray, s: float) -> np.ndarray:
    """Negative Euclidean gradient of the Riesz s-energy (repulsion)."""
    diff = points[:, None, :] - points[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, np.inf)
    dist = np.maximum(dist, 1e-12)
    return s * np.sum(diff / dist[..., None] ** (s + 2.0), axis=1)


def optimize_codebook(
    M: int,
    T: int,
    R: float,
    seed: int,
    task_ids: Sequence[str] | None = None,
    *,
    iterations: int = CODEBOOK_ITERATIONS,
    step_size: float = CODEBOOK_STEP_SIZE,
    s: float = RIESZ_EXPONENT,
) -> TaskCodebook:
    """Spread M points of norm R over the T-dimensional sphere.

    Best effort: the achieved minimum angle is logged, never checked.
    """
    if M < 2 or T < 2:
        raise InvalidDimensionsError(f"Need M >= 2 and T >= 2, got M={M}, T={T}")
    if R <= 0:
        raise InvalidDimensionsError(f"Radius must be positive, got {R}")
    if task_ids is None:
        task_ids = [f"task_{i:02d}" for i in range(M)]
    if len(task_ids) != M:
        raise InvalidDimensionsError(f"{len(task_ids)} task ids for M={M}")

    rng = np.random.default_rng(seed)
    points = rng.standard_normal((M, T))
    points /= np.linalg.norm(points, axis=1, keepdims=True)

    for k in range(iterations):
        lr = step_size * 0.5 * (1.0 + math.cos(math.pi * k / iterations))
        direction = _riesz_direction(points, s)
        # tangent-space projection
        direction -= np.sum(direction * points, axis=1, keepdims=True) * points
        scale = np.linalg.norm(direction, axis=1).max()
        if scale < 1e-15:
            break
        points = points + lr * direction / scale
        points /= np.linalg.norm(points, axis=1, keepdims=True)

    vectors = points * R
    # exact norm R after scaling
    vectors *= R / np.linalg.norm(vectors, axis=1, keepdims=True)
    codebook = TaskCodebook(
        embeddings=tuple(TaskEmbedding(tid, vec, R) for tid, vec in zip(task_ids, vectors)),
        T=T,
        R=R,
    )
    _LOGGER.info(
        "Optimized codebook M=%d T=%d R=%g seed=%d: min pairwise angle %.4f°",
        M, T, R, seed, codebook.min_pairwise_angle,
    )
    return codebook


def embed_task(codebook: TaskCodebook, task_id: str) -> TaskEmbedding:
    try:
        return codebook.embeddings[codebook._index[task_id]]
    except KeyError:
        raise UnknownTaskError(task_id) from None


def prior_mean(embedding: TaskEmbedding, latent_shape: Iterable[int]) -> np.ndarray:
    """μ_task[t, n, k] = τ[t]."""
    shape = tuple(int(dim) for dim in latent_shape)
    if len(shape) != 3 or shape[0] != embedding.T:
        raise ShapeMismatchError(
            f"Latent shape {shape} does not match embedding length {embedding.T}"
        )
    return np.broadcast_to(embedding.vector[:, None, None], shape).copy()


def save_codebook(codebook: TaskCodebook, path, *, force: bool = True, extra: dict | None = None) -> None:
    document = codebook.to_dict()
    if extra:
        document.update(extra)
    write_json(path, document, force=force)
    _LOGGER.info("Codebook with %d tasks written to %s", len(codebook), path)


def load_codebook(path) -> TaskCodebook:
    document = read_json(path)
    if not isinstance(document, dict) or document.get("format_version") != CODEBOOK_FORMAT_VERSION:
        raise RCNFValidationError(f"{path} is not a version {CODEBOOK_FORMAT_VERSION} codebook")
    codebook = TaskCodebook.from_dict(document)
    _LOGGER.debug(
        "Loaded codebook %s: %d tasks, min angle %.4f°",
        path, len(codebook), codebook.min_pairwise_angle,
    )
    return codebook
