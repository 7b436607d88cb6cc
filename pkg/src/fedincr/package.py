"""FEDPKG01 model containers and weight merging.

Layout of an encoded package::

    b"FEDPKG01" | u32 LE header length | UTF-8 JSON header | f32 LE weight blob | SHA-256 trailer

The trailer hashes every preceding byte. The JSON header carries all fields
except the weights and the hash itself, with sorted keys so that encoding is
deterministic.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from .errors import ArchMismatch, FormatError, HashMismatch, PackageError
from .nn import ArchDescriptor, NetworkWeights

MAGIC = b"FEDPKG01"
SUFFIX = ".fpkg"
_HASH_LEN = 32
_PREFIX_LEN = len(MAGIC) + 4


def utc_now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True, eq=False)
class ModelPackage:
    task_id: str
    version: int
    parent_version: int | None
    descriptor: ArchDescriptor
    label_names: tuple[str, ...]
    weights: NetworkWeights
    created_at: str = field(default_factory=utc_now)
    content_hash: bytes = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "label_names", tuple(self.label_names))
        self._check()
        object.__setattr__(self, "content_hash", hashlib.sha256(self._body()).digest())

    def _check(self) -> None:
        if not isinstance(self.task_id, str) or not self.task_id:
            raise PackageError("task_id must be a non-empty string")
        if int(self.version) != self.version or self.version < 0:
            raise PackageError("version must be a non-negative integer")
        if len(self.label_names) != self.descriptor.n_classes:
            raise PackageError(
                f"{len(self.label_names)} label names for {self.descriptor.n_classes} classes"
            )
        if self.weights.descriptor != self.descriptor:
            raise PackageError("weights do not match descriptor")
        if self.weights.dtype != np.float32:
            raise PackageError("package weights must be float32")
        if not self.weights.is_finite():
            raise PackageError("non-finite weights")

    @property
    def canonical_resolution(self) -> float:
        return self.descriptor.canonical_resolution

    @property
    def hash_hex(self) -> str:
        return self.content_hash.hex()

    def header(self) -> dict:
        return {
            "task_id": self.task_id,
            "version": int(self.version),
            "parent_version": None if self.parent_version is None else int(self.parent_version),
            "descriptor": self.descriptor.to_dict(),
            "label_names": list(self.label_names),
            "canonical_resolution": self.descriptor.canonical_resolution,
            "created_at": self.created_at,
            "n_params": self.weights.n_parameters(),
        }

    def _body(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
        return MAGIC + struct.pack("<I", len(head)) + head + self.weights.to_blob()

    def evolve(self, **changes) -> "ModelPackage":
        """Copy with some fields replaced (hash recomputed)."""
        return replace(self, **changes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelPackage):
            return NotImplemented
        return (
            self.task_id == other.task_id
            and self.version == other.version
            and self.parent_version == other.parent_version
            and self.descriptor == other.descriptor
            and self.label_names == other.label_names
            and self.created_at == other.created_at
            and self.weights == other.weights
            and self.content_hash == other.content_hash
        )

    __hash__ = None  # type: ignore[assignment]


def encode_package(pkg: ModelPackage) -> bytes:
    body = pkg._body()
    return body + hashlib.sha256(body).digest()


def decode_package(data: bytes) -> ModelPackage:
    data = bytes(data)
    if len(data) < _PREFIX_LEN or data[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic")
    if len(data) < _PREFIX_LEN + _HASH_LEN:
        raise FormatError("truncated package")
    (hlen,) = struct.unpack("<I", data[len(MAGIC) : _PREFIX_LEN])
    blob_len = len(data) - _PREFIX_LEN - hlen - _HASH_LEN
    if blob_len < 0 or blob_len % 4:
        raise FormatError("header length inconsistent with file size")
    body, trailer = data[:-_HASH_LEN], data[-_HASH_LEN:]
    try:
        header = json.loads(data[_PREFIX_LEN : _PREFIX_LEN + hlen].decode("utf-8"))
        n_params = int(header["n_params"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        if hashlib.sha256(body).digest() != trailer:
            raise HashMismatch("content hash does not match") from exc
        raise FormatError(f"unreadable header: {exc}") from exc
    if n_params * 4 != blob_len:
        raise FormatError(f"header declares {n_params} params, blob holds {blob_len // 4}")
    if hashlib.sha256(body).digest() != trailer:
        raise HashMismatch("content hash does not match")
    try:
        descriptor = ArchDescriptor.from_dict(header["descriptor"])
        weights = NetworkWeights.from_blob(descriptor, data[_PREFIX_LEN + hlen : -_HASH_LEN])
        pkg = ModelPackage(
            task_id=header["task_id"],
            version=header["version"],
            parent_version=header["parent_version"],
            descriptor=descriptor,
            label_names=tuple(header["label_names"]),
            weights=weights,
            created_at=header["created_at"],
        )
    except PackageError:
        raise
    except Exception as exc:
        raise PackageError(f"invalid package contents: {exc}") from exc
    if pkg.content_hash != trailer:
        # header was valid JSON but not in canonical form
        raise FormatError("non-canonical header encoding")
    return pkg


def read_package(path) -> ModelPackage:
    with open(path, "rb") as fh:
        return decode_package(fh.read())


def write_package(pkg: ModelPackage, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_package(pkg))


@dataclass(frozen=True)
class MergeConfig:
    alpha: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("merge alpha must lie in [0, 1]")


def merge_weights(a: NetworkWeights, b: NetworkWeights, alpha: float) -> NetworkWeights:
    if a.descriptor != b.descriptor:
        raise ArchMismatch("cannot merge weights of different architectures")
    # single f64 expression rounded once, so merge(a, b, x) == merge(b, a, 1 - x)
    params = {
        k: (alpha * a[k].astype(np.float64) + (1.0 - alpha) * b[k].astype(np.float64)).astype(np.float32)
        for k in a
    }
    return NetworkWeights(a.descriptor, params)


def merge_packages(
    a: ModelPackage,
    b: ModelPackage,
    cfg: MergeConfig = MergeConfig(),
    *,
    version: int | None = None,
    created_at: str | None = None,
) -> ModelPackage:
    """Linear combination ``alpha * a + (1 - alpha) * b`` of every parameter.

    The result inherits ``a``'s metadata with ``parent_version = a.version``.
    """
    if a.descriptor != b.descriptor:
        raise ArchMismatch("descriptor mismatch")
    if a.task_id != b.task_id:
        raise ArchMismatch(f"task mismatch: {a.task_id!r} vs {b.task_id!r}")
    return ModelPackage(
        task_id=a.task_id,
        version=a.version if version is None else version,
        parent_version=a.version,
        descriptor=a.descriptor,
        label_names=a.label_names,
        weights=merge_weights(a.weights, b.weights, cfg.alpha),
        created_at=created_at or utc_now(),
    )
