"""Named parameter trees: alignment checks, convex blending, and checkpoint IO.

A ParamTree is an ordered name -> float32 array map plus provenance. Trees
produced by fine-tuning a shared initialization stay structurally aligned,
which is what makes elementwise convex combinations of their parameters
meaningful. Blending accumulates in float64 and stores float32.

Checkpoint container layout (bit-exact, little-endian):
    magic "GIC1" | u32 header_len | JSON header | raw f32 payloads | u32 CRC32
The JSON header carries format_version, arch_id, role, lineage, seed and a
tensor index [{name, dtype:"f32", shape, offset, nbytes}] in payload order.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, CoefficientError, FormatError, IntegrityError

MAGIC = b"GIC1"
FORMAT_VERSION = 1

ROLES = ("generator", "discriminator", "classifier")


def _freeze(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d scalars to 1-d; np.array keeps shape ()
    out = np.array(arr, dtype=np.float32, order="C")
    out.flags.writeable = False
    return out


@dataclass
class ParamTree:
    """Ordered map of named float32 arrays with architecture and lineage metadata.

    Entries iterate lexicographically by name. Lineage is a list of event
    dicts and must start with an ``init`` event (carrying the init seed and,
    for network trees, the architecture fields needed to rebuild the module).
    """

    arch_id: str
    entries: dict[str, np.ndarray]
    lineage: list[dict]
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if not self.lineage:
            raise ValueError("lineage must be non-empty")
        if self.lineage[0].get("event") != "init":
            raise ValueError("lineage must begin with an init event")
        ordered = {}
        for name in sorted(self.entries):
            arr = _freeze(self.entries[name])
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"entry {name!r} contains non-finite values")
            ordered[name] = arr
        self.entries = ordered

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def names(self) -> list[str]:
        return list(self.entries)

    def shapes(self) -> dict[str, tuple]:
        return {n: a.shape for n, a in self.entries.items()}

    @property
    def init_event(self) -> dict:
        return self.lineage[0]

    @property
    def init_seed(self):
        return self.lineage[0].get("seed")

    def num_params(self) -> int:
        return int(sum(a.size for a in self.entries.values()))

    def with_event(self, event: dict) -> "ParamTree":
        """Copy of this tree with one lineage event appended."""
        return ParamTree(self.arch_id, dict(self.entries), self.lineage + [event], self.role)

    def replace_entries(self, entries: dict[str, np.ndarray]) -> "ParamTree":
        return ParamTree(self.arch_id, entries, list(self.lineage), self.role)

    def equals(self, other: "ParamTree") -> bool:
        """Bitwise payload equality plus metadata equality."""
        if (self.arch_id, self.role, self.lineage) != (other.arch_id, other.role, other.lineage):
            return False
        if self.names() != other.names():
            return False
        return all(self.entries[n].tobytes() == other.entries[n].tobytes() for n in self.entries)


@dataclass(frozen=True)
class InterpolationCoefficients:
    """Convex weights over K source trees: nonnegative, summing to one."""

    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def __len__(self) -> int:
        return len(self.values)

    def validate(self):
        if len(self.values) == 0:
            raise CoefficientError("coefficient vector is empty")
        for i, v in enumerate(self.values):
            if not np.isfinite(v):
                raise CoefficientError(f"coefficient {i} is not finite")
            if v < 0:
                raise CoefficientError(f"coefficient {i} is negative ({v})")
        total = float(sum(self.values))
        if abs(total - 1.0) > 1e-9:
            raise CoefficientError(f"coefficients sum to {total}, not 1 within 1e-9")

    @classmethod
    def one_hot(cls, index: int, k: int) -> "InterpolationCoefficients":
        return cls(tuple(1.0 if i == index else 0.0 for i in range(k)))


MISMATCH_REASONS = ("missing", "extra", "shape", "arch_id", "lineage_root")


@dataclass
class AlignmentReport:
    aligned: bool
    mismatches: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        assert self.aligned == (len(self.mismatches) == 0)


def check_aligned(trees: list[ParamTree]) -> AlignmentReport:
    """Report whether trees share arch_id, entry names/shapes, and init event.

    All failures are collected into the report; nothing raises. Trees with a
    different init seed (even when shapes agree) are reported as
    ``lineage_root`` mismatches because blending unrelated networks is
    meaningless.
    """
    if len(trees) < 2:
        raise ValueError("need at least two trees to check alignment")
    ref = trees[0]
    mismatches: list[tuple[str, str]] = []
    seen = set()

    def add(name, reason):
        if (name, reason) not in seen:
            seen.add((name, reason))
            mismatches.append((name, reason))

    for t in trees[1:]:
        if t.arch_id != ref.arch_id:
            add("", "arch_id")
        if t.init_event != ref.init_event:
            add("", "lineage_root")
        ref_names, t_names = set(ref.entries), set(t.entries)
        for name in sorted(ref_names - t_names):
            add(name, "missing")
        for name in sorted(t_names - ref_names):
            add(name, "extra")
        for name in sorted(ref_names & t_names):
            if ref.entries[name].shape != t.entries[name].shape:
                add(name, "shape")
    return AlignmentReport(aligned=not mismatches, mismatches=mismatches)


def interpolate(trees: list[ParamTree], coeffs: InterpolationCoefficients) -> ParamTree:
    """Elementwise convex combination of aligned trees.

    Accumulates each entry as sum_k alpha_k * tree_k[name] in float64 and
    stores float32. One-hot coefficients reproduce the selected source
    bitwise. The result's lineage keeps the shared init event and appends a
    blend event recording the coefficient vector and source lineages.
    """
    coeffs.validate()
    if len(trees) != len(coeffs):
        raise CoefficientError(f"{len(coeffs)} coefficients for {len(trees)} trees")
    if len(trees) >= 2:
        report = check_aligned(trees)
        if not report.aligned:
            raise AlignmentError(f"trees are not aligned: {report.mismatches}")

    ref = trees[0]
    out: dict[str, np.ndarray] = {}
    alphas = [float(a) for a in coeffs.values]
    for name in ref.entries:
        acc = np.zeros(ref.entries[name].shape, dtype=np.float64)
        for a, t in zip(alphas, trees):
            acc += a * t.entries[name].astype(np.float64)
        out[name] = acc.astype(np.float32)

    event = {
        "event": "interpolate",
        "coefficients": alphas,
        "sources": [t.lineage for t in trees],
    }
    return ParamTree(ref.arch_id, out, [ref.lineage[0], event], ref.role)


def save_checkpoint(tree: ParamTree, path) -> None:
    """Write the bit-exact checkpoint container described in the module docstring."""
    names = tree.names()
    tensors = []
    offset = 0
    payloads = []
    for name in names:
        arr = tree.entries[name]
        raw = arr.astype("<f4", copy=False).tobytes()
        tensors.append({
            "name": name,
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "arch_id": tree.arch_id,
        "role": tree.role,
        "lineage": tree.lineage,
        "seed": tree.init_seed,
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(payloads)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path) -> ParamTree:
    """Read a checkpoint container, verifying structure and payload checksum."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4:
        raise FormatError("file too short for magic and header length")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}")
    (header_len,) = struct.unpack("<I", data[4:8])
    header_end = 8 + header_len
    if header_end + 4 > len(data):
        raise FormatError("truncated header")
    try:
        header = json.loads(data[8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unparseable header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {header.get('format_version')!r}")

    tensors = header.get("tensors")
    if not isinstance(tensors, list):
        raise FormatError("header missing tensor index")
    payload = data[header_end:-4]
    (crc_stored,) = struct.unpack("<I", data[-4:])
    expected_size = sum(int(t["nbytes"]) for t in tensors)
    if len(payload) != expected_size:
        raise FormatError(f"payload is {len(payload)} bytes, header declares {expected_size}")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise IntegrityError("payload CRC32 mismatch")

    entries = {}
    for t in tensors:
        name, shape, off, nbytes = t["name"], tuple(t["shape"]), int(t["offset"]), int(t["nbytes"])
        if t.get("dtype") != "f32":
            raise FormatError(f"tensor {name!r} has unsupported dtype {t.get('dtype')!r}")
        count = int(np.prod(shape)) if shape else 1
        if count * 4 != nbytes:
            raise FormatError(f"tensor {name!r}: shape {shape} does not match {nbytes} bytes")
        if off < 0 or off + nbytes > len(payload):
            raise FormatError(f"tensor {name!r}: payload range out of bounds")
        arr = np.frombuffer(payload[off:off + nbytes], dtype="<f4").reshape(shape)
        if name in entries:
            raise FormatError(f"duplicate tensor name {name!r}")
        entries[name] = arr
    try:
        return ParamTree(header["arch_id"], entries, header["lineage"], header["role"])
    except (KeyError, ValueError) as e:
        raise FormatError(f"invalid tree metadata: {e}") from e
