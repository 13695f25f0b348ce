"""Synthetic constellation task, capsule/parameter file container, and
ingestion of externally produced embedding matrices.

The constellation task is a part-whole classification problem at desk
scale: each class is a fixed constellation of parts, each part a planar
similarity transform (rotation, scale, translation) composed with a
random per-sample entity pose, embedded in the top-left of a
d_cov x d_in capsule slot. Distractor capsules with random poses are
mixed in at a lower score, and the capsule order is shuffled.

The file container ("CAPS") stores capsule batches, routing parameters,
or whole models, as little-endian row-major payloads behind a fixed
header; a JSON twin exists for small, human-readable files. See
docs/capsule_file_format.md for the byte-level layout.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, fields

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .errors import (ConfigError, DataFormatError, FormatVersionError,
                     ShapeError)
from .nn import mask_to_logits
from .routing import (LOGIT_MAX, CapsuleBatch, RoutingConfig, RoutingParams,
                      clamp_scores)
from .tensor import Tensor


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)

# ---------------------------------------------------------------------------
# constellation generator


@dataclass(frozen=True)
class ConstellationSpec:
    """Generator description for the synthetic part-whole task."""

    n_classes: int = 5
    parts_per_class: int = 6
    d_cov: int = 4
    d_in: int = 4
    jitter_std: float = 0.05
    n_distractors: int = 4
    score_present: float = 4.0
    score_distractor: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.parts_per_class < 2:
            raise ConfigError("parts_per_class must be >= 2")
        if self.jitter_std < 0:
            raise ConfigError("jitter_std must be >= 0")
        if self.d_cov < 3 or self.d_in < 3:
            raise ConfigError("pose slots need d_cov >= 3 and d_in >= 3")
        for s in (self.score_present, self.score_distractor):
            if not -LOGIT_MAX <= s <= LOGIT_MAX:
                raise ConfigError(
                    f"scores must lie in [-{LOGIT_MAX}, {LOGIT_MAX}]")

    @property
    def caps_per_sample(self) -> int:
        return self.parts_per_class + self.n_distractors


def spec_from_dict(d: dict) -> ConstellationSpec:
    """Build a spec from parsed JSON; unknown keys are errors."""
    known = {f.name for f in fields(ConstellationSpec)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown constellation keys: {sorted(unknown)}")
    return ConstellationSpec(**d)


def similarity_matrix(theta: float, scale: float, tx: float,
                      ty: float) -> np.ndarray:
    """Homogeneous 3x3 planar similarity transform."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([
        [scale * c, -scale * s, tx],
        [scale * s, scale * c, ty],
        [0.0, 0.0, 1.0],
    ])


def _random_similarity(rng, scale_range, trans_range) -> np.ndarray:
    return similarity_matrix(
        theta=rng.uniform(0.0, 2.0 * np.pi),
        scale=rng.uniform(*scale_range),
        tx=rng.uniform(-trans_range, trans_range),
        ty=rng.uniform(-trans_range, trans_range),
    )


def embed_pose(mat3: np.ndarray, d_cov: int, d_in: int) -> np.ndarray:
    """Place a 3x3 homogeneous transform in the top-left of a d_cov x d_in
    slot whose remaining diagonal is identity."""
    slot = np.eye(d_cov, d_in)
    slot[:3, :3] = mat3
    return slot


def class_templates(spec: ConstellationSpec) -> np.ndarray:
    """Per-class part offsets, shape (n_classes, parts_per_class, 3, 3).
    Fixed by the spec seed, independent of the sample index."""
    rng = np.random.default_rng([spec.seed, 0])
    return np.array([
        [_random_similarity(rng, (0.5, 1.5), 1.0)
         for _ in range(spec.parts_per_class)]
        for _ in range(spec.n_classes)
    ])


def gen_constellation(spec: ConstellationSpec, n_samples: int, start: int = 0):
    """Yield ``n_samples`` labeled samples as (scores, poses, label).

    Pure in (spec, sample index): regenerating any index range gives
    identical samples, so parallel generation by range is deterministic.
    """
    templates = class_templates(spec)
    for index in range(start, start + n_samples):
        rng = np.random.default_rng([spec.seed, 1, index])
        label = int(rng.integers(spec.n_classes))
        entity = _random_similarity(rng, (0.8, 1.25), 2.0)

        poses = np.empty((spec.caps_per_sample, spec.d_cov, spec.d_in))
        scores = np.empty(spec.caps_per_sample)
        for p in range(spec.parts_per_class):
            slot = embed_pose(entity @ templates[label, p],
                              spec.d_cov, spec.d_in)
            if spec.jitter_std > 0:
                slot = slot + rng.normal(0.0, spec.jitter_std, size=slot.shape)
            poses[p] = slot
            scores[p] = spec.score_present
        for q in range(spec.n_distractors):
            poses[spec.parts_per_class + q] = embed_pose(
                _random_similarity(rng, (0.4, 1.9), 3.5),
                spec.d_cov, spec.d_in)
            scores[spec.parts_per_class + q] = spec.score_distractor

        order = rng.permutation(spec.caps_per_sample)
        yield scores[order], poses[order], label


def make_dataset(spec: ConstellationSpec, n_samples: int,
                 start: int = 0) -> tuple[CapsuleBatch, np.ndarray]:
    """Stack a generated range into one batch plus its labels."""
    all_scores, all_poses, labels = [], [], []
    for scores, poses, label in gen_constellation(spec, n_samples, start):
        all_scores.append(scores)
        all_poses.append(poses)
        labels.append(label)
    dt = T.get_default_dtype()
    if n_samples == 0:
        shape = (0, spec.caps_per_sample, spec.d_cov, spec.d_in)
        return (CapsuleBatch(np.zeros(shape[:2], dtype=dt),
                             np.zeros(shape, dtype=dt)),
                np.zeros(0, dtype=np.int64))
    batch = CapsuleBatch(clamp_scores(np.array(all_scores, dtype=dt)),
                         np.array(all_poses, dtype=dt))
    return batch, np.array(labels, dtype=np.int64)


def to_one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.size, n_classes), dtype=T.get_default_dtype())
    out[np.arange(labels.size), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# nearest-template oracle


def nearest_template_classify(spec: ConstellationSpec, scores: np.ndarray,
                              poses: np.ndarray) -> int:
    """Classify one sample by best template alignment.

    Filters capsules by score (present vs distractor), then for every
    class and every choice of anchor part hypothesizes the entity pose
    from the first present capsule, predicts the full constellation, and
    scores it by a minimum-cost matching of Frobenius distances. Usable
    as an independent separability witness: at zero jitter the true class
    has exactly zero cost.
    """
    if spec.score_present <= spec.score_distractor:
        raise ConfigError("oracle needs score_present > score_distractor")
    threshold = 0.5 * (spec.score_present + spec.score_distractor)
    observed = np.asarray(poses)[np.asarray(scores) > threshold][:, :3, :3]
    if len(observed) == 0:
        return 0
    templates = class_templates(spec)
    anchor = observed[0]

    best_class, best_cost = 0, np.inf
    for k in range(spec.n_classes):
        offsets = templates[k]
        for p in range(spec.parts_per_class):
            entity = anchor @ np.linalg.inv(offsets[p])
            predicted = entity[None] @ offsets
            cost = np.linalg.norm(
                predicted[:, None] - observed[None], axis=(2, 3))
            rows, cols = linear_sum_assignment(cost)
            total = cost[rows, cols].sum()
            total += abs(len(predicted) - len(observed)) * 10.0
            if total < best_cost:
                best_cost, best_class = total, k
    return best_class


def oracle_accuracy(spec: ConstellationSpec, batch: CapsuleBatch,
                    labels: np.ndarray) -> float:
    scores = _arr(batch.scores)
    poses = _arr(batch.poses)
    hits = sum(
        nearest_template_classify(spec, scores[i], poses[i]) == labels[i]
        for i in range(len(labels))
    )
    return hits / max(len(labels), 1)


# ---------------------------------------------------------------------------
# embedding ingestion


def ingest_embeddings(vectors: np.ndarray, mask: np.ndarray, d_cov: int = 1,
                      channels=None, channel_table=None) -> CapsuleBatch:
    """Turn a matrix of external embedding vectors into capsules.

    ``vectors`` is (n, m) for one sample or (batch, n, m); each length-m
    vector becomes one capsule of shape (d_cov, m / d_cov). ``mask``
    values in [0, 1] become scores through their clamped log-odds.
    Optional integer ``channels`` (one id per vector) select rows of
    ``channel_table`` added to the vectors before reshaping, tagging
    each capsule's provenance.
    """
    vectors = np.asarray(vectors, dtype=T.get_default_dtype())
    if vectors.ndim not in (2, 3):
        raise ShapeError(f"vectors must be (n, m) or (batch, n, m), got "
                         f"{vectors.shape}")
    m = vectors.shape[-1]
    if m % d_cov != 0:
        raise ShapeError(f"vector length {m} is not divisible by d_cov={d_cov}")
    d_in = m // d_cov
    if channels is not None:
        table = np.asarray(channel_table)
        ids = np.asarray(channels)
        if ids.shape != vectors.shape[:-1]:
            raise ShapeError(f"channels {ids.shape} must match vectors "
                             f"{vectors.shape[:-1]}")
        vectors = vectors + table[ids]
    scores = mask_to_logits(mask)
    poses = vectors.reshape(vectors.shape[:-1] + (d_cov, d_in))
    if scores.shape != vectors.shape[:-1]:
        raise ShapeError(f"mask shape {scores.shape} must match vectors "
                         f"{vectors.shape[:-1]}")
    return CapsuleBatch(scores, poses)


# ---------------------------------------------------------------------------
# file container

MAGIC = b"CAPS"
FORMAT_VERSION = 1
_KIND_BATCH, _KIND_PARAMS, _KIND_MODEL = 1, 2, 3
_DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_CODES_BY_KIND = {np.dtype(np.float64): 1, np.dtype(np.float32): 2}
_MODES = {"fixed": 0, "variable_input": 1, "variable_output": 2}
_MODES_BACK = {v: k for k, v in _MODES.items()}


class _Reader:
    """Byte cursor that reports the offset of any truncation."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise DataFormatError(
                f"truncated payload: needed {n} bytes at byte offset "
                f"{self.offset}, file has {len(self.blob)}"
            )
        out = self.blob[self.offset:self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, dtype: np.dtype, count: int) -> np.ndarray:
        raw = self.take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).copy()

    def done(self):
        if self.offset != len(self.blob):
            raise DataFormatError(
                f"{len(self.blob) - self.offset} unexpected trailing bytes "
                f"at byte offset {self.offset}"
            )


def _dtype_code(arr: np.ndarray) -> int:
    code = _CODES_BY_KIND.get(np.dtype(arr.dtype.type))
    if code is None:
        raise DataFormatError(f"unsupported dtype {arr.dtype}")
    return code


def _header(kind: int, dtype_code: int) -> bytes:
    return MAGIC + struct.pack("<HBB", FORMAT_VERSION, kind, dtype_code)


def _read_header(r: _Reader, expect_kind: int | None = None) -> tuple[int, np.dtype]:
    magic = r.take(4)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, kind, dtype_code = r.unpack("<HBB")
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            f"unsupported format version {version}, this reader handles "
            f"{FORMAT_VERSION}"
        )
    if dtype_code not in _DTYPE_CODES:
        raise DataFormatError(f"unknown dtype code {dtype_code}")
    if expect_kind is not None and kind != expect_kind:
        raise DataFormatError(f"expected kind {expect_kind}, found {kind}")
    return kind, _DTYPE_CODES[dtype_code]


def write_capsules(path, batch: CapsuleBatch, labels=None) -> None:
    """Write a capsule batch (binary ``CAPS`` container, or JSON if the
    path ends in .json)."""
    if str(path).endswith(".json"):
        _write_capsules_json(path, batch, labels)
        return
    batch = batch.batched()
    scores = np.ascontiguousarray(_arr(batch.scores))
    poses = np.ascontiguousarray(_arr(batch.poses))
    b, n, d_cov, d_in = poses.shape
    code = _dtype_code(poses)
    le = _DTYPE_CODES[code]
    buf = io.BytesIO()
    buf.write(_header(_KIND_BATCH, code))
    flags = 1 if labels is not None else 0
    buf.write(struct.pack("<B4I", flags, b, n, d_cov, d_in))
    buf.write(scores.astype(le).tobytes())
    buf.write(poses.astype(le).tobytes())
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (b,):
            raise ShapeError(f"labels must have shape ({b},), got {labels.shape}")
        buf.write(labels.astype("<u4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_capsules(path) -> tuple[CapsuleBatch, np.ndarray | None]:
    """Read a capsule batch; returns (batch, labels-or-None)."""
    if str(path).endswith(".json"):
        return _read_capsules_json(path)
    with open(path, "rb") as f:
        r = _Reader(f.read())
    _, dtype = _read_header(r, expect_kind=_KIND_BATCH)
    flags, b, n, d_cov, d_in = r.unpack("<B4I")
    scores = r.floats(dtype, b * n).reshape(b, n)
    poses = r.floats(dtype, b * n * d_cov * d_in).reshape(b, n, d_cov, d_in)
    labels = None
    if flags & 1:
        raw = r.take(b * 4)
        labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    r.done()
    native = scores.dtype.newbyteorder("=")
    return (CapsuleBatch(scores.astype(native), poses.astype(native)),
            labels)


def _write_capsules_json(path, batch, labels) -> None:
    batch = batch.batched()
    doc = {
        "format": "caps-json",
        "version": FORMAT_VERSION,
        "kind": "capsule_batch",
        "scores": _arr(batch.scores).tolist(),
        "poses": _arr(batch.poses).tolist(),
    }
    if labels is not None:
        doc["labels"] = np.asarray(labels).tolist()
    with open(path, "w") as f:
        json.dump(doc, f)


def _read_capsules_json(path):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "caps-json":
        raise DataFormatError("not a caps-json document")
    if doc.get("version") != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported version {doc.get('version')}")
    if doc.get("kind") != "capsule_batch":
        raise DataFormatError(f"expected capsule_batch, found {doc.get('kind')}")
    dt = T.get_default_dtype()
    labels = doc.get("labels")
    return (CapsuleBatch(np.array(doc["scores"], dtype=dt),
                         np.array(doc["poses"], dtype=dt)),
            None if labels is None else np.asarray(labels, dtype=np.int64))


def _config_dims(config: RoutingConfig) -> tuple[int, int]:
    n_in = 0 if config.n_in is None else config.n_in
    n_out = 0 if config.n_out == "variable" else config.n_out
    return n_in, n_out


def _write_layer(buf, params: RoutingParams, config: RoutingConfig,
                 code: int) -> None:
    le = _DTYPE_CODES[code]
    n_in, n_out = _config_dims(config)
    buf.write(struct.pack(
        "<BB5I I dd",
        _MODES[config.mode], 1 if config.tie_betas else 0,
        n_in, n_out, config.d_cov, config.d_in, config.d_out,
        config.n_iters, config.var_floor, config.denom_eps,
    ))
    buf.write(np.ascontiguousarray(_arr(params.weights)).astype(le).tobytes())
    if config.mode != "variable_output":
        buf.write(np.ascontiguousarray(_arr(params.biases)).astype(le).tobytes())
    buf.write(np.ascontiguousarray(np.atleast_1d(_arr(params.beta_use))).astype(le).tobytes())
    if not config.tie_betas:
        buf.write(np.ascontiguousarray(np.atleast_1d(_arr(params.beta_ign))).astype(le).tobytes())


def _read_layer(r: _Reader, dtype: np.dtype) -> tuple[RoutingParams, RoutingConfig]:
    mode_code, tie, n_in, n_out, d_cov, d_in, d_out, n_iters, var_floor, denom_eps = \
        r.unpack("<BB5I I dd")
    if mode_code not in _MODES_BACK:
        raise DataFormatError(f"unknown sharing mode {mode_code}")
    mode = _MODES_BACK[mode_code]
    config = RoutingConfig(
        n_out="variable" if mode == "variable_output" else n_out,
        n_in=n_in if mode == "fixed" else None,
        d_cov=d_cov, d_in=d_in, d_out=d_out, n_iters=n_iters,
        tie_betas=bool(tie), var_floor=var_floor, denom_eps=denom_eps,
    )
    native = dtype.newbyteorder("=")
    if mode == "fixed":
        wshape = (n_in, n_out, d_in, d_out)
        bshape = (n_in, n_out, d_cov, d_out)
        beta_shape = (n_in, n_out)
    elif mode == "variable_input":
        wshape = (n_out, d_in, d_out)
        bshape = (n_out, d_cov, d_out)
        beta_shape = (n_out,)
    else:
        wshape = (d_in, d_out)
        bshape = None
        beta_shape = ()
    weights = r.floats(dtype, int(np.prod(wshape))).reshape(wshape).astype(native)
    biases = None
    if bshape is not None:
        biases = r.floats(dtype, int(np.prod(bshape))).reshape(bshape).astype(native)
    n_beta = max(int(np.prod(beta_shape)), 1) if beta_shape != () else 1
    beta_use = r.floats(dtype, n_beta).reshape(beta_shape).astype(native)
    if tie:
        beta_ign = beta_use
    else:
        beta_ign = r.floats(dtype, n_beta).reshape(beta_shape).astype(native)
    return RoutingParams(weights, biases, beta_use, beta_ign), config


def write_params(path, params: RoutingParams, config: RoutingConfig) -> None:
    if str(path).endswith(".json"):
        _write_params_json(path, params, config)
        return
    code = _dtype_code(_arr(params.weights))
    buf = io.BytesIO()
    buf.write(_header(_KIND_PARAMS, code))
    _write_layer(buf, params, config, code)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_params(path) -> tuple[RoutingParams, RoutingConfig]:
    if str(path).endswith(".json"):
        return _read_params_json(path)
    with open(path, "rb") as f:
        r = _Reader(f.read())
    _, dtype = _read_header(r, expect_kind=_KIND_PARAMS)
    params, config = _read_layer(r, dtype)
    r.done()
    return params, config


def _write_params_json(path, params: RoutingParams,
                       config: RoutingConfig) -> None:
    n_in, n_out = _config_dims(config)
    doc = {
        "format": "caps-json",
        "version": FORMAT_VERSION,
        "kind": "routing_params",
        "mode": config.mode,
        "tie_betas": config.tie_betas,
        "dims": {"n_in": n_in, "n_out": n_out, "d_cov": config.d_cov,
                 "d_in": config.d_in, "d_out": config.d_out},
        "n_iters": config.n_iters,
        "var_floor": config.var_floor,
        "denom_eps": config.denom_eps,
        "weights": _arr(params.weights).tolist(),
        "beta_use": _arr(params.beta_use).tolist(),
    }
    if params.biases is not None:
        doc["biases"] = _arr(params.biases).tolist()
    if not config.tie_betas:
        doc["beta_ign"] = _arr(params.beta_ign).tolist()
    with open(path, "w") as f:
        json.dump(doc, f)


def _read_params_json(path) -> tuple[RoutingParams, RoutingConfig]:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "caps-json":
        raise DataFormatError("not a caps-json document")
    if doc.get("version") != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported version {doc.get('version')}")
    if doc.get("kind") != "routing_params":
        raise DataFormatError(
            f"expected routing_params, found {doc.get('kind')}")
    mode = doc["mode"]
    if mode not in _MODES:
        raise DataFormatError(f"unknown sharing mode {mode!r}")
    dims = doc["dims"]
    config = RoutingConfig(
        n_out="variable" if mode == "variable_output" else dims["n_out"],
        n_in=dims["n_in"] if mode == "fixed" else None,
        d_cov=dims["d_cov"], d_in=dims["d_in"], d_out=dims["d_out"],
        n_iters=doc["n_iters"], tie_betas=doc["tie_betas"],
        var_floor=doc["var_floor"], denom_eps=doc["denom_eps"],
    )
    dt = T.get_default_dtype()
    weights = np.array(doc["weights"], dtype=dt)
    biases = None
    if mode != "variable_output":
        biases = np.array(doc["biases"], dtype=dt)
    beta_use = np.array(doc["beta_use"], dtype=dt)
    beta_ign = beta_use if config.tie_betas \
        else np.array(doc["beta_ign"], dtype=dt)
    return RoutingParams(weights, biases, beta_use, beta_ign), config


def write_model(path, layers, n_classes: int) -> None:
    """Write a stack of (params, config) routing layers as one model."""
    code = _dtype_code(_arr(layers[0][0].weights))
    buf = io.BytesIO()
    buf.write(_header(_KIND_MODEL, code))
    buf.write(struct.pack("<II", len(layers), n_classes))
    for params, config in layers:
        _write_layer(buf, params, config, code)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_model(path) -> tuple[list[tuple[RoutingParams, RoutingConfig]], int]:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    _, dtype = _read_header(r, expect_kind=_KIND_MODEL)
    n_layers, n_classes = r.unpack("<II")
    layers = [_read_layer(r, dtype) for _ in range(n_layers)]
    r.done()
    return layers, n_classes
