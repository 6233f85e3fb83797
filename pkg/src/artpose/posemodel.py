"""Two-stage set predictor: tokenized raster -> encoder -> query decoder -> heads.

Stage one reads a whole scene and emits a fixed set of person/background
slots with boxes; stage two reads one cropped person and emits keypoint
slots (17 joint classes + background) with coordinates. A linear patch
embedding plays the role of the image stem at desk scale, positional
information comes from a fixed 2-D sinusoidal encoding, and attention is
single-head by default (head count is a config knob).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Box, Keypoint, NUM_KEYPOINTS, _bilinear_sample, crop_raster, patch_to_image_xy
from .matching import inference_keypoint_assignment


class ModelError(Exception):
    pass


@dataclass
class StageConfig:
    """Architecture knobs for one stage of the detector."""

    num_queries: int
    num_classes: int
    token_grid: tuple[int, int] = (8, 8)
    embed_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    num_heads: int = 1
    ffn_dim: int = 128
    input_resolution: tuple[int, int] = (64, 64)  # (h, w) the raster is resampled to

    def __post_init__(self):
        if self.embed_dim % 2 != 0:
            raise ModelError("embed_dim must be even for the 2-D positional encoding halves")
        if self.embed_dim % self.num_heads != 0:
            raise ModelError("embed_dim must divide evenly across heads")
        th, tw = self.token_grid
        ih, iw = self.input_resolution
        if ih % th or iw % tw:
            raise ModelError(f"token grid {self.token_grid} must tile resolution {self.input_resolution}")

    @property
    def num_tokens(self) -> int:
        return self.token_grid[0] * self.token_grid[1]

    @property
    def patch_shape(self) -> tuple[int, int]:
        return (self.input_resolution[0] // self.token_grid[0],
                self.input_resolution[1] // self.token_grid[1])


def detector_config(**overrides) -> StageConfig:
    cfg = dict(num_queries=8, num_classes=2, token_grid=(8, 8), input_resolution=(64, 64))
    cfg.update(overrides)
    return StageConfig(**cfg)


def keypointer_config(**overrides) -> StageConfig:
    # crop aspect mirrors the 4:3 person-crop convention
    cfg = dict(num_queries=24, num_classes=NUM_KEYPOINTS + 1,
               token_grid=(8, 6), input_resolution=(64, 48))
    cfg.update(overrides)
    out = StageConfig(**cfg)
    if out.num_queries < NUM_KEYPOINTS:
        raise ModelError(f"keypoint stage needs at least {NUM_KEYPOINTS} queries")
    return out


@dataclass
class PredictionSet:
    """Fixed-size slot predictions: normalized class rows plus geometry in [0,1]."""

    class_probs: Tensor  # (N, num_classes), rows softmax-normalized
    geometry: Tensor     # (N, 4) boxes or (N, 2) keypoints, sigmoid range

    def detached(self) -> "PredictionSet":
        return PredictionSet(Tensor(self.class_probs.data.copy()),
                             Tensor(self.geometry.data.copy()))


# ---------------------------------------------------------------------------
# Positional encoding and raster tokenization
# ---------------------------------------------------------------------------


def sincos_position_encoding(token_grid: tuple[int, int], dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding: x-half and y-half of the embedding."""
    th, tw = token_grid
    half = dim // 2

    def encode_1d(positions: np.ndarray) -> np.ndarray:
        out = np.zeros((len(positions), half))
        for i in range(half // 2):
            freq = 1.0 / (10000.0 ** (2 * i / half))
            out[:, 2 * i] = np.sin(positions * freq)
            out[:, 2 * i + 1] = np.cos(positions * freq)
        return out

    ys, xs = np.meshgrid(np.arange(th), np.arange(tw), indexing="ij")
    return np.concatenate([encode_1d(xs.ravel()), encode_1d(ys.ravel())], axis=1)


def resample_raster(raster: np.ndarray, resolution: tuple[int, int]) -> np.ndarray:
    if raster.shape == tuple(resolution):
        return raster
    oh, ow = resolution
    cols, rows = np.meshgrid((np.arange(ow) + 0.5) / ow, (np.arange(oh) + 0.5) / oh)
    return _bilinear_sample(raster, cols, rows)


def extract_patches(rasters: np.ndarray, cfg: StageConfig) -> np.ndarray:
    """(B, H, W) -> (B, tokens, patch_pixels), row-major over the token grid."""
    b = rasters.shape[0]
    th, tw = cfg.token_grid
    ph, pw = cfg.patch_shape
    x = rasters.reshape(b, th, ph, tw, pw)
    return x.transpose(0, 1, 3, 2, 4).reshape(b, th * tw, ph * pw)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _linear_params(rng, n_in: int, n_out: int, prefix: str, params: dict) -> None:
    params[f"{prefix}.w"] = ad.parameter(rng.normal(0.0, math.sqrt(1.0 / n_in), (n_in, n_out)))
    params[f"{prefix}.b"] = ad.parameter(np.zeros(n_out))


def _attention_params(rng, dim: int, prefix: str, params: dict) -> None:
    for name in ("q", "k", "v", "o"):
        _linear_params(rng, dim, dim, f"{prefix}.{name}", params)


def _layer_norm_params(dim: int, prefix: str, params: dict) -> None:
    params[f"{prefix}.g"] = ad.parameter(np.ones(dim))
    params[f"{prefix}.b"] = ad.parameter(np.zeros(dim))


def init_params(cfg: StageConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d = cfg.embed_dim
    params: dict[str, Tensor] = {}
    ph, pw = cfg.patch_shape
    _linear_params(rng, ph * pw, d, "stem.patch", params)
    for i in range(cfg.encoder_layers):
        _attention_params(rng, d, f"enc.{i}.attn", params)
        _layer_norm_params(d, f"enc.{i}.ln1", params)
        _layer_norm_params(d, f"enc.{i}.ln2", params)
        _linear_params(rng, d, cfg.ffn_dim, f"enc.{i}.ffn.fc1", params)
        _linear_params(rng, cfg.ffn_dim, d, f"enc.{i}.ffn.fc2", params)
    _layer_norm_params(d, "enc.final", params)
    params["queries"] = ad.parameter(rng.normal(0.0, 0.5, (cfg.num_queries, d)))
    for i in range(cfg.decoder_layers):
        _attention_params(rng, d, f"dec.{i}.self", params)
        _attention_params(rng, d, f"dec.{i}.cross", params)
        _layer_norm_params(d, f"dec.{i}.ln1", params)
        _layer_norm_params(d, f"dec.{i}.ln2", params)
        _layer_norm_params(d, f"dec.{i}.ln3", params)
        _linear_params(rng, d, cfg.ffn_dim, f"dec.{i}.ffn.fc1", params)
        _linear_params(rng, cfg.ffn_dim, d, f"dec.{i}.ffn.fc2", params)
    _layer_norm_params(d, "dec.final", params)
    _linear_params(rng, d, d, "head.cls.fc1", params)
    _linear_params(rng, d, cfg.num_classes, "head.cls.fc2", params)
    geo_dim = 4 if cfg.num_classes == 2 else 2
    _linear_params(rng, d, d, "head.geo.fc1", params)
    _linear_params(rng, d, geo_dim, "head.geo.fc2", params)
    return params


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------


def _linear(params: dict, prefix: str, x: Tensor) -> Tensor:
    return ad.linear(x, params[f"{prefix}.w"], params[f"{prefix}.b"])


def _heads_split(x: Tensor, num_heads: int) -> Tensor:
    if num_heads == 1:
        return x
    b, t, d = x.shape
    dh = d // num_heads
    return ad.swapaxes(ad.reshape(x, (b, t, num_heads, dh)), 1, 2)


def _heads_join(x: Tensor, num_heads: int) -> Tensor:
    if num_heads == 1:
        return x
    b, h, t, dh = x.shape
    return ad.reshape(ad.swapaxes(x, 1, 2), (b, t, h * dh))


def _mha(params: dict, prefix: str, q_in: Tensor, kv_in: Tensor, num_heads: int) -> Tensor:
    q = _heads_split(_linear(params, f"{prefix}.q", q_in), num_heads)
    k = _heads_split(_linear(params, f"{prefix}.k", kv_in), num_heads)
    v = _heads_split(_linear(params, f"{prefix}.v", kv_in), num_heads)
    out = _heads_join(ad.attention(q, k, v), num_heads)
    return _linear(params, f"{prefix}.o", out)


def _ln(params: dict, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _ffn(params: dict, prefix: str, x: Tensor) -> Tensor:
    return _linear(params, f"{prefix}.fc2", ad.relu(_linear(params, f"{prefix}.fc1", x)))


def encode_scene(rasters: np.ndarray, params: dict, cfg: StageConfig) -> Tensor:
    """(B, H, W) rasters -> (B, tokens, dim) memory after the encoder stack."""
    if rasters.ndim != 3:
        raise ModelError(f"encode_scene expects (B, H, W), got {rasters.shape}")
    resampled = np.stack([resample_raster(r, cfg.input_resolution) for r in rasters])
    patches = extract_patches(resampled, cfg)
    x = _linear(params, "stem.patch", ad.constant(patches))
    pos = sincos_position_encoding(cfg.token_grid, cfg.embed_dim)
    x = ad.add(x, ad.constant(pos[None, :, :]))
    for i in range(cfg.encoder_layers):
        normed = _ln(params, f"enc.{i}.ln1", x)
        x = ad.add(x, _mha(params, f"enc.{i}.attn", normed, normed, cfg.num_heads))
        x = ad.add(x, _ffn(params, f"enc.{i}.ffn", _ln(params, f"enc.{i}.ln2", x)))
    return _ln(params, "enc.final", x)


def decode_set(memory: Tensor, params: dict, cfg: StageConfig) -> tuple[Tensor, Tensor]:
    """Cross-attend N learned queries to memory; return batched class/geometry."""
    b = memory.shape[0]
    queries = ad.reshape(params["queries"], (1, cfg.num_queries, cfg.embed_dim))
    x = ad.add(ad.constant(np.zeros((b, cfg.num_queries, cfg.embed_dim))), queries)
    for i in range(cfg.decoder_layers):
        normed = _ln(params, f"dec.{i}.ln1", x)
        x = ad.add(x, _mha(params, f"dec.{i}.self", normed, normed, cfg.num_heads))
        x = ad.add(x, _mha(params, f"dec.{i}.cross", _ln(params, f"dec.{i}.ln2", x),
                           memory, cfg.num_heads))
        x = ad.add(x, _ffn(params, f"dec.{i}.ffn", _ln(params, f"dec.{i}.ln3", x)))
    x = _ln(params, "dec.final", x)
    cls_logits = _linear(params, "head.cls.fc2", ad.relu(_linear(params, "head.cls.fc1", x)))
    geo_raw = _linear(params, "head.geo.fc2", ad.relu(_linear(params, "head.geo.fc1", x)))
    return ad.softmax(cls_logits, axis=-1), ad.sigmoid(geo_raw)


class SetPredictor:
    """One stage: parameters plus the forward pass, checkpointable."""

    def __init__(self, cfg: StageConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def forward_batch(self, rasters: np.ndarray) -> tuple[Tensor, Tensor]:
        memory = encode_scene(rasters, self.params, self.cfg)
        return decode_set(memory, self.params, self.cfg)

    def predictions(self, rasters: np.ndarray) -> list[PredictionSet]:
        """Per-scene prediction sets; tape-linked when called inside a Tape."""
        probs, geo = self.forward_batch(rasters)
        return [PredictionSet(probs[i], geo[i]) for i in range(rasters.shape[0])]

    def predict_scene(self, raster: np.ndarray) -> PredictionSet:
        pred = self.predictions(raster[None])[0]
        return PredictionSet(Tensor(pred.class_probs.data), Tensor(pred.geometry.data))

    def save(self, path) -> None:
        ad.save_params(self.params, path)

    @classmethod
    def load(cls, cfg: StageConfig, path) -> "SetPredictor":
        arrays = ad.load_params(path)
        params = {k: ad.parameter(v, name=k) for k, v in arrays.items()}
        return cls(cfg, params=params)

    def clone(self) -> "SetPredictor":
        params = {k: ad.parameter(v.data.copy(), name=k) for k, v in self.params.items()}
        return SetPredictor(self.cfg, params=params)


# ---------------------------------------------------------------------------
# Two-stage inference
# ---------------------------------------------------------------------------


@dataclass
class DetectedPose:
    box: Box
    score: float
    keypoints: list[Keypoint]      # 17 slots in image coordinates
    joint_scores: np.ndarray       # matched class probability per joint


def keypoints_in_box(scene_raster: np.ndarray, box: Box, keypointer: SetPredictor,
                     report_threshold: float = 0.1) -> tuple[list[Keypoint], np.ndarray]:
    """Run stage two on one box crop and map joints back to image coordinates."""
    patch = crop_raster(scene_raster, box, keypointer.cfg.input_resolution)
    pred = keypointer.predict_scene(patch)
    probs = pred.class_probs.data
    coords = pred.geometry.data
    assigned = inference_keypoint_assignment(probs, NUM_KEYPOINTS, report_threshold)
    keypoints = []
    scores = np.zeros(NUM_KEYPOINTS)
    for class_id, (slot, present) in enumerate(assigned):
        x, y = patch_to_image_xy(box, float(coords[slot, 0]), float(coords[slot, 1]))
        scores[class_id] = probs[slot, class_id]
        keypoints.append(Keypoint(x, y, class_id, 2 if present else 0))
    return keypoints, scores


def two_stage_inference(scene, detector: SetPredictor, keypointer: SetPredictor,
                        box_threshold: float = 0.5,
                        report_threshold: float = 0.1) -> list[DetectedPose]:
    """Detect persons, crop each confident box, and predict its keypoints."""
    pred = detector.predict_scene(scene.raster)
    probs = pred.class_probs.data
    boxes = pred.geometry.data
    out = []
    for j in range(probs.shape[0]):
        score = float(probs[j, 0])
        if score < box_threshold:
            continue
        box = Box(*boxes[j])
        keypoints, joint_scores = keypoints_in_box(scene.raster, box, keypointer, report_threshold)
        out.append(DetectedPose(box=box, score=score, keypoints=keypoints,
                                joint_scores=joint_scores))
    out.sort(key=lambda d: -d.score)
    return out
