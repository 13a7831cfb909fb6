"""Merkle-verified dataset and code images (a dm-verity analogue).

Image layout (all integers little-endian)::

    offset 0   magic        4s   b"VFLD"
           4   version      u16  1
           6   block_size   u32  4096
          10   record_width u32  float64 columns per record (features, then label)
          14   record_count u64
          22   text_width   u32  bytes of NUL-padded text per record, 0 if absent
          26   records      record_count * (8 * record_width + text_width) bytes
    ...zero padding up to a multiple of block_size

The header sits inside block 0, so it is covered by the Merkle root like
everything else. The tree is built over the blocks with

    leaf = H(0x00 || block)       node = H(0x01 || left || right)

and an unpaired node is promoted unchanged to the next level. The dataset
commitment is ``H(0x02 || salt || root)``; code images use the bare root.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .crypto import (
    TAG_COMMITMENT,
    TAG_MERKLE_LEAF,
    TAG_MERKLE_NODE,
    Digest,
    from_hex,
    hash_parts,
    to_hex,
)

BLOCK_SIZE = 4096
MAGIC = b"VFLD"
VERSION = 1
HEADER = struct.Struct("<4sHIIQI")
SALT_SIZE = 16


class StorageError(Exception):
    pass


class ImageFormatError(StorageError, ValueError):
    pass


class CommitmentMismatch(StorageError):
    """The image does not match the commitment it is expected to carry."""


class IntegrityViolation(CommitmentMismatch):
    """A block read after mount failed verification against the root."""


# -- Merkle tree -----------------------------------------------------------


def leaf_hash(block: bytes) -> Digest:
    return hash_parts(TAG_MERKLE_LEAF, block)


def node_hash(left: Digest, right: Digest) -> Digest:
    return hash_parts(TAG_MERKLE_NODE, left, right)


@dataclass
class MerkleTree:
    block_size: int
    levels: list[list[Digest]]

    @property
    def leaves(self) -> list[Digest]:
        return self.levels[0]

    @property
    def root(self) -> Digest:
        return self.levels[-1][0]

    def __len__(self) -> int:
        return len(self.levels[0])

    def proof(self, index: int) -> list[Optional[Digest]]:
        """Sibling per level, bottom-up; ``None`` where the node was promoted."""
        if not 0 <= index < len(self):
            raise IndexError(index)
        path: list[Optional[Digest]] = []
        for level in self.levels[:-1]:
            sib = index ^ 1
            path.append(level[sib] if sib < len(level) else None)
            index >>= 1
        return path


def tree_from_leaves(leaves: Sequence[Digest], block_size: int = BLOCK_SIZE) -> MerkleTree:
    if not leaves:
        raise ValueError("Merkle tree needs at least one block")
    levels = [list(leaves)]
    while len(levels[-1]) > 1:
        cur = levels[-1]
        nxt = [node_hash(cur[i], cur[i + 1]) for i in range(0, len(cur) - 1, 2)]
        if len(cur) % 2:
            nxt.append(cur[-1])
        levels.append(nxt)
    return MerkleTree(block_size=block_size, levels=levels)


def _pad_block(block: bytes, block_size: int) -> bytes:
    if len(block) > block_size:
        raise ValueError(f"block of {len(block)} bytes exceeds block size {block_size}")
    return bytes(block) + b"\x00" * (block_size - len(block))


def merkle_build(blocks: Sequence[bytes], block_size: int = BLOCK_SIZE) -> MerkleTree:
    """Build the tree over ``blocks``; short blocks are zero-padded."""
    if not blocks:
        raise ValueError("Merkle tree needs at least one block")
    return tree_from_leaves([leaf_hash(_pad_block(b, block_size)) for b in blocks], block_size)


def merkle_verify_block(
    root: Digest, index: int, block: bytes, path: Sequence[Optional[Digest]]
) -> bool:
    if index < 0 or index >> len(path):
        return False
    h = leaf_hash(block)
    for sib in path:
        if sib is None:
            # only the last, even-positioned node of a level is ever promoted
            if index & 1:
                return False
        elif index & 1:
            h = node_hash(sib, h)
        else:
            h = node_hash(h, sib)
        index >>= 1
    return h == root


def split_blocks(data: bytes, block_size: int = BLOCK_SIZE) -> list[bytes]:
    if not data:
        return [b"\x00" * block_size]
    return [_pad_block(data[i : i + block_size], block_size) for i in range(0, len(data), block_size)]


def code_measurement(code_image: bytes) -> Digest:
    """Unsalted Merkle root of a code image."""
    return merkle_build(split_blocks(code_image)).root


# -- commitments -----------------------------------------------------------


@dataclass(frozen=True)
class DataCommitment:
    root: Digest
    salt: bytes
    commitment: Digest

    @classmethod
    def create(cls, root: Digest, salt: bytes) -> "DataCommitment":
        if len(salt) != SALT_SIZE:
            raise ValueError(f"salt must be {SALT_SIZE} bytes")
        return cls(root=root, salt=salt, commitment=hash_parts(TAG_COMMITMENT, salt, root))

    def check(self) -> bool:
        return self.commitment == hash_parts(TAG_COMMITMENT, self.salt, self.root)


# -- dataset images --------------------------------------------------------


class _FileSource:
    """Reads blocks straight from disk on every access."""

    def __init__(self, path: Path, block_size: int):
        self.path = Path(path)
        self.block_size = block_size

    def read_block(self, i: int) -> bytes:
        with open(self.path, "rb") as f:
            f.seek(i * self.block_size)
            return f.read(self.block_size)


class _MemorySource:
    def __init__(self, data: bytearray, block_size: int):
        self.data = data
        self.block_size = block_size

    def read_block(self, i: int) -> bytes:
        bs = self.block_size
        return bytes(self.data[i * bs : (i + 1) * bs])


@dataclass
class DatasetImage:
    """Image blocks plus the sidecar metadata needed to mount them.

    ``leaves`` plays the role of the dm-verity hash device: it is trusted
    only after its root reproduces the expected commitment.
    """

    source: Union[_FileSource, _MemorySource]
    leaves: list[Digest]
    salt: bytes
    block_size: int = BLOCK_SIZE

    @property
    def block_count(self) -> int:
        return len(self.leaves)

    @property
    def root(self) -> Digest:
        return tree_from_leaves(self.leaves, self.block_size).root

    @property
    def commitment(self) -> DataCommitment:
        return DataCommitment.create(self.root, self.salt)

    @property
    def data(self) -> bytearray:
        """Mutable backing bytes of an in-memory image."""
        if not isinstance(self.source, _MemorySource):
            raise TypeError("image is file-backed")
        return self.source.data

    def read_block(self, i: int) -> bytes:
        return self.source.read_block(i)

    def to_bytes(self) -> bytes:
        return b"".join(self.read_block(i) for i in range(self.block_count))

    def sidecar(self) -> dict:
        c = self.commitment
        return {
            "version": VERSION,
            "root": to_hex(c.root),
            "salt": self.salt.hex(),
            "commitment": to_hex(c.commitment),
            "block_count": self.block_count,
            "block_size": self.block_size,
        }


def _record_size(width: int, text_width: int) -> int:
    return 8 * width + text_width


def pack_dataset(
    records,
    salt: bytes,
    texts: Optional[Sequence[bytes]] = None,
    text_width: int = 0,
) -> tuple[DatasetImage, DataCommitment]:
    """Pack float rows (and an optional text column) into a verified image."""
    rows = np.ascontiguousarray(np.asarray(records, dtype="<f8"))
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError("pack_dataset needs at least one record")
    if len(salt) != SALT_SIZE:
        raise ValueError(f"salt must be {SALT_SIZE} bytes")
    n, width = rows.shape
    if texts is not None:
        if len(texts) != n:
            raise ValueError("one text entry per record required")
        if text_width <= 0:
            text_width = max(1, max(len(t) for t in texts))
        if any(len(t) > text_width for t in texts):
            raise ValueError(f"text longer than text_width={text_width}")
    else:
        text_width = 0

    buf = bytearray(HEADER.pack(MAGIC, VERSION, BLOCK_SIZE, width, n, text_width))
    for i in range(n):
        buf += rows[i].tobytes()
        if text_width:
            buf += texts[i].ljust(text_width, b"\x00")
    if len(buf) % BLOCK_SIZE:
        buf += b"\x00" * (BLOCK_SIZE - len(buf) % BLOCK_SIZE)

    leaves = [leaf_hash(bytes(buf[i : i + BLOCK_SIZE])) for i in range(0, len(buf), BLOCK_SIZE)]
    image = DatasetImage(_MemorySource(buf, BLOCK_SIZE), leaves, bytes(salt), BLOCK_SIZE)
    return image, image.commitment


def save_image(image: DatasetImage, path: Union[str, os.PathLike]) -> Path:
    """Write ``path`` (blocks), ``path.tree`` (leaf hashes) and ``path.json`` (sidecar)."""
    path = Path(path)
    path.write_bytes(image.to_bytes())
    Path(str(path) + ".tree").write_bytes(b"".join(image.leaves))
    Path(str(path) + ".json").write_text(json.dumps(image.sidecar(), sort_keys=True, indent=1) + "\n")
    return path


def load_image(path: Union[str, os.PathLike]) -> DatasetImage:
    """Open a saved image lazily; blocks are read from disk on demand."""
    path = Path(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    bs = int(side["block_size"])
    raw = Path(str(path) + ".tree").read_bytes()
    if len(raw) % 32 or len(raw) // 32 != int(side["block_count"]):
        raise ImageFormatError(f"{path}.tree does not match block_count")
    leaves = [raw[i : i + 32] for i in range(0, len(raw), 32)]
    return DatasetImage(_FileSource(path, bs), leaves, bytes.fromhex(side["salt"]), bs)


def read_sidecar_commitment(path: Union[str, os.PathLike]) -> DataCommitment:
    side = json.loads(Path(str(path) + ".json").read_text())
    return DataCommitment(
        root=from_hex(side["root"]), salt=bytes.fromhex(side["salt"]), commitment=from_hex(side["commitment"])
    )


# -- mounted access --------------------------------------------------------


class DatasetHandle:
    """A mounted image. Every block is re-read and re-verified on each access."""

    def __init__(self, image: DatasetImage, tree: MerkleTree, commitment: DataCommitment):
        self.image = image
        self.tree = tree
        self.commitment = commitment
        self._proofs: dict[int, list] = {}
        hdr = self._verified_block(0)[: HEADER.size]
        magic, version, bs, width, count, text_width = HEADER.unpack(hdr)
        if magic != MAGIC or version != VERSION or bs != image.block_size:
            raise ImageFormatError("bad image header")
        need = HEADER.size + count * _record_size(width, text_width)
        if width == 0 or count == 0 or -(-need // bs) != image.block_count:
            raise ImageFormatError("header does not match image size")
        self.record_width = width
        self.record_count = count
        self.text_width = text_width
        self._rsize = _record_size(width, text_width)

    def _verified_block(self, i: int) -> bytes:
        block = self.image.read_block(i)
        path = self._proofs.get(i)
        if path is None:
            path = self._proofs[i] = self.tree.proof(i)
        if len(block) != self.image.block_size or not merkle_verify_block(self.tree.root, i, block, path):
            raise IntegrityViolation(f"block {i} failed verification")
        return block

    def _read_span(self, start: int, length: int) -> bytes:
        bs = self.image.block_size
        first, last = start // bs, (start + length - 1) // bs
        data = b"".join(self._verified_block(b) for b in range(first, last + 1))
        off = start - first * bs
        return data[off : off + length]

    def _raw_record(self, i: int) -> bytes:
        if not 0 <= i < self.record_count:
            raise IndexError(f"record {i} out of range (count={self.record_count})")
        return self._read_span(HEADER.size + i * self._rsize, self._rsize)

    def read_record(self, i: int) -> np.ndarray:
        raw = self._raw_record(i)
        return np.frombuffer(raw[: 8 * self.record_width], dtype="<f8").astype(np.float64)

    def read_text(self, i: int) -> bytes:
        raw = self._raw_record(i)
        return raw[8 * self.record_width :].rstrip(b"\x00")

    def __len__(self) -> int:
        return self.record_count

    def __iter__(self) -> Iterator[np.ndarray]:
        for i in range(self.record_count):
            yield self.read_record(i)

    def read_all(self) -> tuple[np.ndarray, list[bytes]]:
        """All rows (verified block by block) and the text column, if any."""
        raw = self._read_span(HEADER.size, self.record_count * self._rsize)
        w8 = 8 * self.record_width
        rows = np.empty((self.record_count, self.record_width), dtype=np.float64)
        texts = []
        for i in range(self.record_count):
            rec = raw[i * self._rsize : (i + 1) * self._rsize]
            rows[i] = np.frombuffer(rec[:w8], dtype="<f8")
            texts.append(rec[w8:].rstrip(b"\x00"))
        return rows, texts


def mount_dataset(image: DatasetImage, expected: DataCommitment) -> DatasetHandle:
    """Check the image's hash tree against ``expected`` and open it for reading."""
    try:
        tree = tree_from_leaves(image.leaves, image.block_size)
    except ValueError as e:
        raise CommitmentMismatch(str(e)) from e
    actual = DataCommitment.create(tree.root, image.salt)
    if actual.commitment != expected.commitment:
        raise CommitmentMismatch(
            f"dataset commitment {actual.commitment.hex()[:16]} != expected {expected.commitment.hex()[:16]}"
        )
    return DatasetHandle(image, tree, actual)
