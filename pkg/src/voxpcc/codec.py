"""End-to-end block codec: training, checkpoints, bitstreams, evaluation.

A cloud is partitioned into occupied octree blocks; each block's latent
and side information are range-coded with tables derived deterministically
from the checkpoint, so encoder and decoder agree bit-exactly. Decoding
recovers per-block occupancy through probability thresholding at the
transmitted true point count.
"""

from __future__ import annotations

import hashlib
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import entropy, nn
from .errors import DataError, UsageError
from .geometry import Octree, PointCloud, VoxelBlock, partition_octree, \
    leaf_origins, reassemble, threshold_topk
from .metrics import RDPoint, d1_psnr, d2_psnr
from .models import ACTIVATIONS, VARIANTS, ModelConfig, Network, \
    build_network
from .rangecoder import pack_stream, unpack_stream

FORMAT_VERSION = 1
BITSTREAM_MAGIC = b"VPCB"
CHECKPOINT_MAGIC = b"VPCK"
ARCHIVE_MAGIC = b"VPCA"
NULL_DIGEST = b"\x00" * 8


def _halvings(size: int, times: int) -> tuple[int, int, int]:
    dims = (size,) * 3
    for _ in range(times):
        dims = tuple(-(-d // 2) for d in dims)
    return dims


def latent_dims(block_size: int) -> tuple[int, int, int]:
    return _halvings(block_size, 3)


def side_dims(block_size: int) -> tuple[int, int, int]:
    return _halvings(block_size, 5)


# ---------------------------------------------------------------------------
# checkpoint format

def _meta_text(mapping: dict[str, str]) -> bytes:
    lines = [f"{k} = {v}" for k, v in sorted(mapping.items())]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_meta(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"bad checkpoint metadata line: {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(path, network: Network,
                    extra: dict[str, str] | None = None) -> str:
    """Write config metadata plus every named tensor; returns the file's
    sha256 hex digest."""
    meta = dict(network.config.to_mapping())
    meta.update({k: str(v) for k, v in (extra or {}).items()})
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<H", FORMAT_VERSION)
    text = _meta_text(meta)
    body += struct.pack("<I", len(text)) + text
    named = network.named_parameters()
    body += struct.pack("<I", len(named))
    for name in sorted(named):
        data = named[name].data
        nb = name.encode("utf-8")
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<B", data.ndim)
        body += struct.pack(f"<{data.ndim}I", *data.shape)
        body += data.astype("<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(body)
    return hashlib.sha256(bytes(body)).hexdigest()


def load_checkpoint(path) -> tuple[Network, dict[str, str], bytes]:
    """Rebuild the network a checkpoint describes.

    Returns (network, metadata, digest8) where digest8 is the first eight
    bytes of the file's sha256, as embedded in bitstream headers.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 14 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise DataError(f"{path}: checkpoint checksum mismatch")
    at = 4
    (version,) = struct.unpack_from("<H", raw, at)
    at += 2
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, at)
    at += 4
    meta = _parse_meta(raw[at:at + meta_len].decode("utf-8"))
    at += meta_len
    config = ModelConfig.from_mapping(meta)
    network = build_network(config, seed=int(meta.get("seed", "0")))
    named = network.named_parameters()
    (count,) = struct.unpack_from("<I", raw, at)
    at += 4
    seen = set()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, at)
        at += 2
        name = raw[at:at + name_len].decode("utf-8")
        at += name_len
        ndim = raw[at]
        at += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, at)
        at += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f8", count=size,
                             offset=at).reshape(shape)
        at += 8 * size
        if name not in named:
            raise DataError(f"{path}: unknown tensor {name}")
        if named[name].data.shape != data.shape:
            raise DataError(f"{path}: tensor {name} has shape {data.shape},"
                            f" expected {named[name].data.shape}")
        named[name].data = data.astype(np.float64).copy()
        seen.add(name)
    missing = set(named) - seen
    if missing:
        raise DataError(f"{path}: checkpoint misses tensors "
                        f"{sorted(missing)[:3]}")
    return network, meta, hashlib.sha256(raw).digest()[:8]


# ---------------------------------------------------------------------------
# block archive (prepared training data)

def save_block_archive(path, blocks: list[np.ndarray]) -> None:
    """Persist occupancy blocks as bit-packed records."""
    if not blocks:
        raise UsageError("refusing to write an empty block archive")
    size = blocks[0].shape[0]
    body = bytearray()
    body += ARCHIVE_MAGIC + struct.pack("<HHI", FORMAT_VERSION, size,
                                        len(blocks))
    for occ in blocks:
        occ = np.asarray(occ, dtype=bool)
        if occ.shape != (size,) * 3:
            raise UsageError("archive blocks must share one size")
        body += np.packbits(occ.reshape(-1)).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(body)


def load_block_archive(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != ARCHIVE_MAGIC:
        raise DataError(f"{path}: not a block archive")
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise DataError(f"{path}: archive checksum mismatch")
    version, size, count = struct.unpack_from("<HHI", raw, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported archive version {version}")
    per = size ** 3 // 8
    at = 12
    if len(raw) - 4 - at != per * count:
        raise DataError(f"{path}: archive length mismatch")
    blocks = []
    for _ in range(count):
        bits = np.unpackbits(np.frombuffer(raw, np.uint8, per, at))
        blocks.append(bits.astype(bool).reshape(size, size, size))
        at += per
    return blocks


def blocks_from_clouds(clouds, block_size: int) -> list[np.ndarray]:
    """All occupied blocks of several clouds, in cloud then leaf order."""
    out = []
    for cloud in clouds:
        out.extend(b.occupancy for b in
                   partition_octree(cloud, block_size).blocks)
    return out


# ---------------------------------------------------------------------------
# forward pass and loss

def _block_terms(network: Network, occ: np.ndarray, mode: str, rng):
    x = nn.Tensor(occ[None].astype(np.float64))
    y = network.analysis(x)
    z = network.hyper_analysis(y)
    z_hat = entropy.quantize(z, mode, rng)
    sigma = network.hyper_synthesis(z_hat, y.data.shape[1:])
    y_hat = entropy.quantize(y, mode, rng)
    p_y = entropy.likelihood_gaussian(y_hat, sigma)
    p_z = entropy.likelihood_factorized(z_hat, network.prior)
    rate = entropy.rate_bits([p_y, p_z])
    x_hat = network.synthesis(y_hat)
    distortion = nn.focal_loss(occ[None].astype(np.float64), x_hat)
    return rate, distortion


def batch_loss(network: Network, occs, lam: float, mode: str,
               rng=None) -> nn.Tensor:
    """Mean over blocks of rate + lambda * focal * voxels-per-block."""
    if not occs:
        raise UsageError("batch_loss needs at least one block")
    weight = lam * network.config.block_size ** 3
    total = None
    for occ in occs:
        rate, distortion = _block_terms(network, occ, mode, rng)
        term = rate + weight * distortion
        total = term if total is None else total + term
    return total * (1.0 / len(occs))


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainSchedule:
    """Rate-point sweep settings; lambdas are visited in ascending order
    with warm starts."""

    lambdas: tuple = (5e-5, 1e-4, 2e-4, 3e-4)
    max_steps: int = 400
    batch_size: int = 8
    val_every: int = 50
    val_batches: int = 10
    patience: int = 3
    lr_main: float = 1e-4
    lr_prior: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not self.lambdas:
            raise UsageError("schedule needs at least one lambda")
        if min(self.lambdas) <= 0:
            raise UsageError("lambdas must be positive")
        if self.max_steps < 1 or self.batch_size < 1:
            raise UsageError("steps and batch size must be positive")


@dataclass
class TrainResult:
    lam: float
    steps: int
    step_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    checkpoint: str = ""


def split_train_val(count: int) -> tuple[list[int], list[int]]:
    """Deterministic 80/20 split: every fifth block validates."""
    val = list(range(0, count, 5))
    train = [i for i in range(count) if i % 5]
    return train, val


def train(blocks, config: ModelConfig, schedule: TrainSchedule,
          checkpoint_dir=None, log=None) -> tuple[Network, list[TrainResult]]:
    """Optimize one network across the lambda sweep.

    Adam runs with separate learning rates for the transform parameters
    and the prior; validation loss is measured deterministically every
    val_every steps and a stage stops after `patience` consecutive
    non-improvements. Non-finite losses abort with the offending stage.
    """
    blocks = [np.asarray(b, dtype=bool) for b in blocks]
    if len(blocks) < 2:
        raise DataError("training needs at least two blocks")
    for b in blocks:
        if b.shape != (config.block_size,) * 3:
            raise DataError(f"block shape {b.shape} does not match "
                            f"configured size {config.block_size}")
    train_idx, val_idx = split_train_val(len(blocks))
    train_set = [blocks[i] for i in train_idx]
    val_set = [blocks[i] for i in val_idx]

    network = build_network(config, seed=schedule.seed)
    rng = np.random.default_rng(schedule.seed + 1)
    results = []
    val_pos = 0
    for lam in sorted(schedule.lambdas):
        params = network.parameters()
        opt_main = nn.Adam([p for p in params if p.group == "main"],
                           schedule.lr_main)
        opt_prior = nn.Adam([p for p in params if p.group == "prior"],
                            schedule.lr_prior)
        best = math.inf
        bad = 0
        result = TrainResult(lam, 0)
        for step in range(schedule.max_steps):
            pick = rng.integers(0, len(train_set),
                                size=schedule.batch_size)
            loss = batch_loss(network, [train_set[i] for i in pick],
                              lam, "train", rng)
            value = loss.item()
            if not math.isfinite(value):
                raise DataError(f"training diverged at lambda={lam:g}, "
                                f"step={step}")
            result.step_losses.append(value)
            result.steps = step + 1
            for p in params:
                p.grad = None
            nn.backward(loss)
            opt_main.step()
            opt_prior.step()
            if (step + 1) % schedule.val_every == 0:
                vals = []
                for _ in range(schedule.val_batches):
                    batch = [val_set[(val_pos + j) % len(val_set)]
                             for j in range(schedule.batch_size)]
                    val_pos = (val_pos + schedule.batch_size) % len(val_set)
                    vals.append(batch_loss(network, batch, lam,
                                           "test").item())
                vloss = float(np.mean(vals))
                result.val_losses.append(vloss)
                if log:
                    log(f"lambda={lam:g} step={step + 1} "
                        f"train={value:.3f} val={vloss:.3f}")
                if vloss < best - 1e-9:
                    best, bad = vloss, 0
                else:
                    bad += 1
                    if bad >= schedule.patience:
                        break
        if checkpoint_dir is not None:
            path = f"{checkpoint_dir}/model_lam{lam:g}.vpck"
            save_checkpoint(path, network,
                            extra={"lambda": f"{lam:g}",
                                   "seed": str(schedule.seed)})
            result.checkpoint = path
        results.append(result)
    return network, results


# ---------------------------------------------------------------------------
# bitstream

_HEADER = struct.Struct("<4sHIHBBd8sII")


@dataclass
class BitstreamHeader:
    resolution: int
    block_size: int
    variant: str
    activation: str
    lam: float
    checkpoint_digest: bytes
    block_count: int
    masks: bytes


def _pack_header(h: BitstreamHeader) -> bytes:
    return _HEADER.pack(
        BITSTREAM_MAGIC, FORMAT_VERSION, h.resolution, h.block_size,
        VARIANTS.index(h.variant), ACTIVATIONS.index(h.activation),
        h.lam, h.checkpoint_digest, h.block_count, len(h.masks)) + h.masks


def parse_header(data: bytes) -> tuple[BitstreamHeader, int]:
    if len(data) < _HEADER.size or data[:4] != BITSTREAM_MAGIC:
        raise DataError("not a compressed-cloud bitstream")
    (_, version, resolution, block, var_i, act_i, lam, digest,
     count, masks_len) = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported bitstream version {version}")
    if var_i >= len(VARIANTS) or act_i >= len(ACTIVATIONS):
        raise DataError("corrupt bitstream header")
    end = _HEADER.size + masks_len
    if end > len(data):
        raise DataError("truncated octree mask stream")
    header = BitstreamHeader(resolution, block, VARIANTS[var_i],
                             ACTIVATIONS[act_i], lam, digest, count,
                             data[_HEADER.size:end])
    return header, end


def _z_tables(network: Network, tables: entropy.CodecTables,
              count_per_channel: int) -> list:
    per = []
    for c in range(network.config.hyper_channels[1]):
        per.extend([tables.factorized[c]] * count_per_channel)
    return per


def _encode_block(network: Network, tables: entropy.CodecTables,
                  occ: np.ndarray) -> bytes:
    x = nn.Tensor(occ[None].astype(np.float64))
    y = network.analysis(x).data
    z = network.hyper_analysis(nn.Tensor(y)).data
    z_hat = entropy.quantize(z, "test")
    sigma = network.hyper_synthesis(nn.Tensor(z_hat), y.shape[1:]).data
    y_hat = entropy.quantize(y, "test")

    z_syms = z_hat.reshape(z_hat.shape[0], -1).astype(np.int64)
    z_payload = entropy.range_encode(
        z_syms.reshape(-1), _z_tables(network, tables, z_syms.shape[1]))
    bins = entropy.sigma_bin_indices(sigma.reshape(-1),
                                     tables.sigma_centers)
    y_payload = entropy.range_encode(
        y_hat.reshape(-1).astype(np.int64),
        [tables.gaussian[i] for i in bins])
    return (struct.pack("<I", int(occ.sum()))
            + pack_stream(z_payload) + pack_stream(y_payload))


def _decode_block(network: Network, tables: entropy.CodecTables,
                  data: bytes, offset: int,
                  block_size: int) -> tuple[np.ndarray, int]:
    if offset + 4 > len(data):
        raise DataError("truncated block record")
    (point_count,) = struct.unpack_from("<I", data, offset)
    z_payload, offset = unpack_stream(data, offset + 4)
    y_payload, offset = unpack_stream(data, offset)

    h2 = network.config.hyper_channels[1]
    latent = network.config.latent_channels
    zd = side_dims(block_size)
    yd = latent_dims(block_size)
    n_z = zd[0] * zd[1] * zd[2]
    z_syms = entropy.range_decode(z_payload, h2 * n_z,
                                  _z_tables(network, tables, n_z))
    z_hat = z_syms.astype(np.float64).reshape((h2,) + zd)
    sigma = network.hyper_synthesis(nn.Tensor(z_hat), yd).data
    bins = entropy.sigma_bin_indices(sigma.reshape(-1),
                                     tables.sigma_centers)
    n_y = latent * yd[0] * yd[1] * yd[2]
    y_syms = entropy.range_decode(y_payload, n_y,
                                  [tables.gaussian[i] for i in bins])
    y_hat = y_syms.astype(np.float64).reshape((latent,) + yd)
    probs = network.synthesis(nn.Tensor(y_hat)).data[0]
    if point_count > probs.size:
        raise DataError(f"block claims {point_count} points in "
                        f"{probs.size} voxels")
    return threshold_topk(probs, int(point_count)), offset


def encode_point_cloud(cloud: PointCloud, network: Network,
                       lam: float = 0.0,
                       checkpoint_digest: bytes = NULL_DIGEST,
                       jobs: int = 1) -> bytes:
    """Compress a cloud under a trained network; fully deterministic."""
    if cloud.resolution < network.config.block_size:
        raise UsageError(f"resolution {cloud.resolution} below block size "
                         f"{network.config.block_size}")
    octree = partition_octree(cloud, network.config.block_size)
    tables = entropy.build_cdf_tables(network.prior)
    header = BitstreamHeader(cloud.resolution, network.config.block_size,
                             network.config.variant,
                             network.config.activation, lam,
                             checkpoint_digest, len(octree.blocks),
                             octree.masks)
    occs = [b.occupancy for b in octree.blocks]
    if jobs > 1 and len(occs) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(
                lambda occ: _encode_block(network, tables, occ), occs))
    else:
        records = [_encode_block(network, tables, occ) for occ in occs]
    return _pack_header(header) + b"".join(records)


def decode_point_cloud(data: bytes, network: Network,
                       checkpoint_digest: bytes | None = None,
                       jobs: int = 1) -> PointCloud:
    """Reconstruct a cloud from a bitstream produced by the same
    checkpoint; header/model mismatches raise rather than mis-decode."""
    header, offset = parse_header(data)
    cfg = network.config
    if header.block_size != cfg.block_size:
        raise DataError(f"bitstream block size {header.block_size} vs "
                        f"model {cfg.block_size}")
    if header.variant != cfg.variant or header.activation != cfg.activation:
        raise DataError(f"bitstream expects {header.variant}/"
                        f"{header.activation}, model is {cfg.variant}/"
                        f"{cfg.activation}")
    if (checkpoint_digest is not None
            and header.checkpoint_digest != NULL_DIGEST
            and header.checkpoint_digest != checkpoint_digest):
        raise DataError("bitstream was produced by a different checkpoint")
    if header.block_count == 0:
        return PointCloud(np.zeros((0, 3), dtype=np.int64),
                          header.resolution)
    origins = leaf_origins(header.masks, header.resolution,
                           header.block_size)
    if len(origins) != header.block_count:
        raise DataError(f"octree lists {len(origins)} leaves, header "
                        f"says {header.block_count}")
    tables = entropy.build_cdf_tables(network.prior)
    occs = []
    for _ in range(header.block_count):
        occ, offset = _decode_block(network, tables, data, offset,
                                    header.block_size)
        occs.append(occ)
    if offset != len(data):
        raise DataError("trailing bytes after the last block")
    blocks = [VoxelBlock(origin, header.block_size, occ)
              for origin, occ in zip(origins, occs)]
    return reassemble(Octree(header.resolution, header.block_size,
                             header.masks, blocks))


def evaluate_rd(original: PointCloud, data: bytes,
                network: Network) -> RDPoint:
    """Decode a bitstream and measure it against the original cloud."""
    if len(original) == 0:
        raise UsageError("cannot evaluate against an empty cloud")
    header, _ = parse_header(data)
    decoded = decode_point_cloud(data, network)
    bpp = 8.0 * len(data) / len(original)
    return RDPoint(header.lam, bpp, d1_psnr(original, decoded),
                   d2_psnr(original, decoded))
