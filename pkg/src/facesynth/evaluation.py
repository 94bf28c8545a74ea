"""Quantitative harnesses: cross-validated recovery error, sliced Wasserstein
distance over image patches, and identity nearest-neighbor distance curves.

All randomized procedures derive their streams from a root seed through
``numpy.random.SeedSequence`` spawning, so reports are reproducible and
independent of execution order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import convolve1d

from .errors import CorpusError, FormatError
from .mesh import AlignedCorpus
from .morphable import MorphableModel, build_model, coefficient_std, project
from .coupling import fit_coupling, synthesize_geometry

_PYRAMID_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


# ---------------------------------------------------------------------------
# Cross-validated geometry recovery
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CvReport:
    """Identity-disjoint k-fold recovery errors for one coupling variant.

    ``entry_ids``/``entry_errors`` list every held-out face (fold by fold) as
    "identity/expression" with its L2 recovery error; ``mean_error`` averages
    over faces, not folds.
    """

    method: str
    fold_errors: tuple[float, ...]
    mean_error: float
    fold_assignment: dict[str, int]
    folds: int
    seed: int
    entry_ids: tuple[str, ...] = ()
    entry_errors: tuple[float, ...] = ()

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "folds": self.folds,
            "seed": self.seed,
            "fold_errors": list(self.fold_errors),
            "mean_error": self.mean_error,
            "fold_assignment": dict(self.fold_assignment),
            "entry_ids": list(self.entry_ids),
            "entry_errors": list(self.entry_errors),
        }


def assign_folds(identities: list[str], folds: int, seed: int) -> dict[str, int]:
    """Shuffle identities by seed and split into near-equal contiguous folds."""
    if len(identities) < folds:
        raise CorpusError(f"need at least {folds} identities for {folds}-fold CV, have {len(identities)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(identities))
    assignment: dict[str, int] = {}
    for fold_idx, chunk in enumerate(np.array_split(order, folds)):
        for i in chunk:
            assignment[identities[int(i)]] = fold_idx
    return assignment


def cross_validate(
    corpus: AlignedCorpus,
    variant: str,
    *,
    folds: int = 10,
    seed: int = 0,
    k_geometry: int = 50,
    k_texture: int = 50,
    ridge: float | None = None,
    noise_scale: float = 1.0,
    temperature: float = 1.0,
) -> CvReport:
    """Identity-disjoint k-fold cross validation of a coupling variant.

    Per fold, the morphable model and coupling are fit on the other folds and
    geometries are recovered from the held-out entries' color vectors; the
    error of one face is the L2 norm of the geometry difference. The report
    carries per-fold means and the mean over all faces.
    """
    assignment = assign_folds(corpus.identities, folds, seed)
    fold_errors = []
    entry_ids = []
    entry_errors = []
    for fold_idx in range(folds):
        train = tuple(e for e in corpus.entries if assignment[e.identity] != fold_idx)
        test = tuple(e for e in corpus.entries if assignment[e.identity] == fold_idx)
        train_corpus = AlignedCorpus(topology=corpus.topology, entries=train)
        model = build_model(train_corpus, k_geometry=k_geometry, k_texture=k_texture)
        coupling = fit_coupling(train_corpus, model, variant, ridge=ridge, noise_scale=noise_scale)
        errors = []
        for entry_idx, entry in enumerate(test):
            entry_seed = np.random.SeedSequence([seed, fold_idx, entry_idx]).generate_state(1)[0]
            recovered = synthesize_geometry(
                coupling, entry.colors, seed=int(entry_seed), temperature=temperature
            )
            errors.append(float(np.linalg.norm(recovered - entry.geometry)))
            entry_ids.append(f"{entry.identity}/{entry.expression}")
        fold_errors.append(float(np.mean(errors)))
        entry_errors.extend(errors)
    return CvReport(
        method=variant,
        fold_errors=tuple(fold_errors),
        mean_error=float(np.mean(entry_errors)),
        fold_assignment=assignment,
        folds=folds,
        seed=seed,
        entry_ids=tuple(entry_ids),
        entry_errors=tuple(entry_errors),
    )


# ---------------------------------------------------------------------------
# Sliced Wasserstein distance over Laplacian-pyramid patches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SwdReport:
    """Per-resolution sliced Wasserstein distances (reported x1e3) and their mean."""

    resolutions: tuple[int, ...]
    values: tuple[float, ...]
    average: float
    params: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "resolutions": list(self.resolutions),
            "values": list(self.values),
            "average": self.average,
            "params": dict(self.params),
        }


def _blur(channel: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = convolve1d(channel, kernel, axis=0, mode="reflect")
    return convolve1d(out, kernel, axis=1, mode="reflect")


def pyramid_reduce(image: np.ndarray) -> np.ndarray:
    """Gaussian blur then 2x decimation, per channel."""
    blurred = np.stack([_blur(image[..., c], _PYRAMID_KERNEL) for c in range(image.shape[2])], axis=-1)
    return blurred[::2, ::2]


def pyramid_expand(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Zero-stuffed 2x upsampling with a doubled-gain blur, cropped to shape."""
    h, w, ch = image.shape
    up = np.zeros((2 * h, 2 * w, ch))
    up[::2, ::2] = image
    out = np.stack([_blur(up[..., c], 2.0 * _PYRAMID_KERNEL) for c in range(ch)], axis=-1)
    return out[: shape[0], : shape[1]]


def _resolution_chain(side: int, resolutions: tuple[int, ...]) -> list[int]:
    res = sorted(set(int(r) for r in resolutions), reverse=True)
    if res != [int(r) for r in resolutions]:
        raise ValueError("resolutions must be strictly descending")
    for r in res:
        if r < 2:
            raise ValueError("resolutions must be at least 2")
    chain = []
    s = res[0]
    while s >= res[-1]:
        chain.append(s)
        if s == res[-1]:
            break
        s //= 2
    if res[-1] not in chain or any(r not in chain for r in res):
        raise ValueError("each resolution must be reachable from the largest by halving")
    steps = 0
    s = side
    while s > res[0]:
        if s % 2:
            raise ValueError(f"image side {side} cannot be halved down to {res[0]}")
        s //= 2
        steps += 1
    if s != res[0]:
        raise ValueError(f"image side {side} cannot be halved down to {res[0]}")
    return chain


def laplacian_levels(image: np.ndarray, resolutions: tuple[int, ...]) -> dict[int, np.ndarray]:
    """Band-pass pyramid levels of a square image at the requested resolutions.

    Each level is the image at that scale minus the upsampled blur of the
    next coarser scale; the coarsest requested level is the blurred image
    itself.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != image.shape[1]:
        raise ValueError("expected a square (S, S, C) image")
    chain = _resolution_chain(image.shape[0], tuple(resolutions))
    current = image
    while current.shape[0] > chain[0]:
        current = pyramid_reduce(current)
    wanted = set(int(r) for r in resolutions)
    levels: dict[int, np.ndarray] = {}
    for r in chain:
        if r == chain[-1]:
            if r in wanted:
                levels[r] = current
            break
        coarser = pyramid_reduce(current)
        if r in wanted:
            levels[r] = current - pyramid_expand(coarser, current.shape[:2])
        current = coarser
    return levels


def _mask_at(mask: np.ndarray | None, side: int) -> np.ndarray | None:
    """Min-pool a validity mask down to the given side; None stays None."""
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    while m.shape[0] > side:
        if m.shape[0] % 2:
            raise ValueError("mask side must be halvable to the level resolution")
        m = m[::2, ::2] & m[1::2, ::2] & m[::2, 1::2] & m[1::2, 1::2]
    if m.shape[0] != side:
        raise ValueError("mask does not reach the level resolution by halving")
    return m


def sample_patches(
    level: np.ndarray, count: int, patch: int, rng: np.random.Generator, mask: np.ndarray | None = None
) -> np.ndarray:
    """Draw ``count`` patches (with replacement) avoiding masked-out texels.

    Returns an (count, patch, patch, C) array. A patch is admissible when all
    of its texels are valid in the mask.
    """
    side = level.shape[0]
    if patch > side:
        raise ValueError(f"patch size {patch} exceeds level resolution {side}")
    if mask is not None:
        window_ok = sliding_window_view(mask, (patch, patch)).all(axis=(2, 3))
        positions = np.argwhere(window_ok)
        if len(positions) == 0:
            raise ValueError("empty patch pool after masking")
        pick = positions[rng.integers(0, len(positions), size=count)]
    else:
        pick = np.stack(
            [rng.integers(0, side - patch + 1, size=count), rng.integers(0, side - patch + 1, size=count)],
            axis=1,
        )
    rows = pick[:, 0][:, None, None] + np.arange(patch)[None, :, None]
    cols = pick[:, 1][:, None, None] + np.arange(patch)[None, None, :]
    return level[rows, cols]


def normalize_patches(patches: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Standardize each patch per channel to zero mean and unit (floored) std."""
    mean = patches.mean(axis=(1, 2), keepdims=True)
    std = patches.std(axis=(1, 2), keepdims=True)
    return (patches - mean) / np.maximum(std, floor)


def projected_swd(features_a: np.ndarray, features_b: np.ndarray, directions: np.ndarray) -> float:
    """Exact 1-D Wasserstein averaged over the given unit projection directions.

    Feature sets are (N, D); both projections are sorted and truncated to the
    smaller count before taking the mean absolute difference.
    """
    pa = np.sort(features_a @ directions.T, axis=0)
    pb = np.sort(features_b @ directions.T, axis=0)
    n = min(len(pa), len(pb))
    if n == 0:
        raise ValueError("cannot compare empty feature sets")
    return float(np.mean(np.abs(pa[:n] - pb[:n])))


def _random_directions(dim: int, count: int, rng: np.random.Generator) -> np.ndarray:
    dirs = rng.standard_normal((count, dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _patch_features(images, masks, resolution_levels, resolution, patch, per_image, rng):
    feats = []
    for idx, levels in enumerate(resolution_levels):
        level = levels[resolution]
        mask = _mask_at(masks[idx], level.shape[0]) if masks is not None else None
        patches = sample_patches(level, per_image, patch, rng, mask)
        feats.append(normalize_patches(patches).reshape(per_image, -1))
    return np.concatenate(feats, axis=0)


def sliced_wasserstein(
    images_a,
    images_b,
    resolutions=(128, 64, 32, 16),
    *,
    patch: int = 7,
    patches_per_image: int = 128,
    projections: int = 128,
    repeats: int = 4,
    seed: int = 0,
    masks_a=None,
    masks_b=None,
) -> SwdReport:
    """Multi-resolution sliced Wasserstein distance between two image sets.

    Images are square (S, S, 3) arrays in [0, 1] with S reachable from the
    largest resolution by halving. Per resolution, band-pass pyramid levels
    feed randomly sampled, per-channel-normalized patches; those are projected
    onto random unit directions and compared by exact sorted 1-D Wasserstein
    distance, averaged over projections and ``repeats`` independent repeats.
    Values are scaled by 1e3 for reporting. Optional masks exclude background
    texels from patch sampling.
    """
    images_a = [np.asarray(im, dtype=np.float64) for im in images_a]
    images_b = [np.asarray(im, dtype=np.float64) for im in images_b]
    if not images_a or not images_b:
        raise ValueError("both image sets must be non-empty")
    resolutions = tuple(int(r) for r in resolutions)
    for im in images_a + images_b:
        if im.ndim != 3 or im.shape[0] != im.shape[1]:
            raise ValueError("images must be square (S, S, C) arrays")
        if im.shape[0] < max(resolutions):
            raise ValueError("image side below the largest requested resolution")
    if patch > min(resolutions):
        raise ValueError(f"patch size {patch} exceeds the smallest resolution {min(resolutions)}")

    levels_a = [laplacian_levels(im, resolutions) for im in images_a]
    levels_b = [laplacian_levels(im, resolutions) for im in images_b]

    root = np.random.SeedSequence(seed)
    repeat_seeds = root.spawn(repeats)
    dim = patch * patch * images_a[0].shape[2]
    per_resolution = {r: [] for r in resolutions}
    for rep in range(repeats):
        res_seeds = repeat_seeds[rep].spawn(len(resolutions))
        for r_idx, resolution in enumerate(resolutions):
            rng_a, rng_b, rng_p = (np.random.default_rng(s) for s in res_seeds[r_idx].spawn(3))
            fa = _patch_features(images_a, masks_a, levels_a, resolution, patch, patches_per_image, rng_a)
            fb = _patch_features(images_b, masks_b, levels_b, resolution, patch, patches_per_image, rng_b)
            dirs = _random_directions(dim, projections, rng_p)
            per_resolution[resolution].append(projected_swd(fa, fb, dirs))
    values = tuple(float(np.mean(per_resolution[r])) * 1e3 for r in resolutions)
    return SwdReport(
        resolutions=resolutions,
        values=values,
        average=float(np.mean(values)),
        params={
            "patch": patch,
            "patches_per_image": patches_per_image,
            "projections": projections,
            "repeats": repeats,
            "seed": seed,
        },
    )


# ---------------------------------------------------------------------------
# Identity descriptors and nearest-neighbor distance curves
# ---------------------------------------------------------------------------


def identity_descriptor(
    model: MorphableModel,
    geometry: np.ndarray | None = None,
    texture_colors: np.ndarray | None = None,
    k: int = 50,
) -> np.ndarray:
    """Unit-norm identity descriptor from standardized model coefficients.

    Texture coefficients come first, then geometry; each block is divided by
    the training coefficient standard deviations (zero-variance components
    contribute zero). Blocks for missing inputs are zero, so texture-only
    descriptors live in the texture subspace. Raises ValueError for the
    degenerate all-zero case (e.g. the mean face), which has no direction.
    """
    if geometry is None and texture_colors is None:
        raise ValueError("need geometry, texture colors, or both")
    k = min(int(k), model.rank)
    blocks = []
    for space, x in (("texture", texture_colors), ("geometry", geometry)):
        if x is None:
            blocks.append(np.zeros(k))
            continue
        coeffs = project(model, np.asarray(x, dtype=np.float64), space, k).values
        std = coefficient_std(model, space, k)
        scaled = np.divide(coeffs, std, out=np.zeros(k), where=std > 1e-12)
        blocks.append(scaled)
    vec = np.concatenate(blocks)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise ValueError("descriptor is the zero vector (mean face); no direction to normalize")
    return vec / norm


def corpus_descriptors(corpus: AlignedCorpus, model: MorphableModel, k: int = 50):
    """Descriptors for every corpus entry; ids are 'identity/expression'."""
    ids, vecs = [], []
    for e in corpus.entries:
        ids.append(f"{e.identity}/{e.expression}")
        vecs.append(identity_descriptor(model, geometry=e.geometry, texture_colors=e.colors, k=k))
    return ids, np.stack(vecs)


def save_descriptors(path, ids, vectors) -> None:
    vectors = np.asarray(vectors, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        for name, vec in zip(ids, vectors):
            fh.write(name + " " + " ".join(f"{v:.17g}" for v in vec) + "\n")


def load_descriptors(path):
    """Read a descriptor file: one 'id v1 v2 ... vd' line per entry."""
    ids, rows = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 2:
                raise FormatError(f"{path}:{lineno}: descriptor line needs an id and values")
            try:
                rows.append([float(p) for p in parts[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric descriptor value") from exc
            ids.append(parts[0])
    if not ids:
        raise FormatError(f"{path}: no descriptors found")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise FormatError(f"{path}: descriptor rows have mixed lengths {sorted(widths)}")
    return ids, np.asarray(rows, dtype=np.float64)


def descriptors_for_ids(wanted_ids, path):
    """Bit-exact pass-through lookup of external descriptors by id."""
    ids, matrix = load_descriptors(path)
    index = {name: i for i, name in enumerate(ids)}
    missing = [w for w in wanted_ids if w not in index]
    if missing:
        raise FormatError(f"{path}: missing descriptors for ids: {', '.join(missing[:5])}")
    return matrix[[index[w] for w in wanted_ids]]


@dataclass(frozen=True)
class DistanceCurves:
    """Labeled sorted nearest-neighbor distance arrays on a normalized x axis."""

    curves: dict[str, np.ndarray]

    def __post_init__(self):
        for name, arr in self.curves.items():
            arr = np.asarray(arr, dtype=np.float64)
            if np.any(np.diff(arr) < 0):
                raise ValueError(f"curve {name!r} is not sorted ascending")
            self.curves[name] = arr

    def x_axis(self, name: str) -> np.ndarray:
        n = len(self.curves[name])
        return np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(n)

    def as_dict(self) -> dict:
        return {name: arr.tolist() for name, arr in self.curves.items()}


def nn_distances(
    query_vectors: np.ndarray,
    reference_vectors: np.ndarray,
    *,
    query_ids=None,
    reference_ids=None,
    exclude_self: bool = False,
) -> np.ndarray:
    """Sorted distances from each query to its nearest reference.

    With ``exclude_self``, references sharing the query's id are skipped
    (ids required); raises if some query ends up with no references.
    """
    q = np.atleast_2d(np.asarray(query_vectors, dtype=np.float64))
    r = np.atleast_2d(np.asarray(reference_vectors, dtype=np.float64))
    if len(q) == 0 or len(r) == 0:
        raise ValueError("query and reference sets must be non-empty")
    d2 = np.sum(q**2, axis=1)[:, None] + np.sum(r**2, axis=1)[None, :] - 2.0 * (q @ r.T)
    d2 = np.maximum(d2, 0.0)
    if exclude_self:
        if query_ids is None or reference_ids is None:
            raise ValueError("exclude_self requires query and reference ids")
        qa = np.asarray(list(query_ids))
        ra = np.asarray(list(reference_ids))
        same = qa[:, None] == ra[None, :]
        d2 = np.where(same, np.inf, d2)
        if np.any(np.all(same, axis=1)):
            raise ValueError("a query has no references left after self exclusion")
    return np.sort(np.sqrt(d2.min(axis=1)))
