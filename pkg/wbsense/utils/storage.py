import hashlib
import json
from pathlib import Path

import numpy as np

from wbsense.utils.errors import CorruptFileError, MissingFileError, StorageError
from wbsense.utils.logger import logger

# Blob dtypes understood by manifests; everything is stored little-endian
BLOB_DTYPES = {
    "complex64": np.dtype("<c8"),
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
}


def ensure_dir(directory):
    """Create ``directory`` (and parents) if it doesn't exist and return it as a Path."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"Error creating directory {directory}: {e}")
        raise StorageError("Cannot create directory", directory) from e
    return directory


def write_json(path, doc):
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        raise StorageError("Cannot write file", path) from e
    return path


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise MissingFileError("File not found", path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        logger.error(f"Malformed JSON in {path}: {e}")
        raise CorruptFileError("Malformed JSON document", path) from e
    except OSError as e:
        logger.error(f"Error reading {path}: {e}")
        raise StorageError("Cannot read file", path) from e


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def array_digest(array) -> str:
    """Digest of an array's values, shape and dtype."""
    array = np.ascontiguousarray(array)
    h = hashlib.sha256()
    h.update(str(array.dtype).encode())
    h.update(str(array.shape).encode())
    h.update(array.tobytes())
    return h.hexdigest()


class BlobWriter:
    """Concatenates arrays of one dtype into a single binary blob.

    ``add`` returns the element offset of the array inside the blob so the
    manifest can locate it again.
    """

    def __init__(self, dtype="complex64"):
        if dtype not in BLOB_DTYPES:
            raise StorageError(f"Unsupported blob dtype {dtype}")
        self.dtype_name = dtype
        self.dtype = BLOB_DTYPES[dtype]
        self._chunks = []
        self._count = 0

    def add(self, array):
        flat = np.ascontiguousarray(array, dtype=self.dtype).ravel()
        offset = self._count
        self._chunks.append(flat.tobytes())
        self._count += flat.size
        return offset

    def tobytes(self):
        return b"".join(self._chunks)

    def write(self, path):
        path = Path(path)
        data = self.tobytes()
        try:
            with open(path, "wb") as fh:
                fh.write(data)
        except OSError as e:
            logger.error(f"Error writing blob {path}: {e}")
            raise StorageError("Cannot write blob", path) from e
        return digest(data)


class BlobReader:
    """Reads arrays back from a blob written by :class:`BlobWriter`."""

    def __init__(self, path, dtype="complex64", expected_digest=None):
        path = Path(path)
        if not path.exists():
            raise MissingFileError("Blob not found", path)
        if dtype not in BLOB_DTYPES:
            raise CorruptFileError(f"Unsupported blob dtype {dtype}", path)
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as e:
            logger.error(f"Error reading blob {path}: {e}")
            raise StorageError("Cannot read blob", path) from e
        if expected_digest is not None and digest(data) != expected_digest:
            raise CorruptFileError("Blob digest does not match manifest", path)
        self.path = path
        self.digest = digest(data)
        dt = BLOB_DTYPES[dtype]
        if len(data) % dt.itemsize:
            raise CorruptFileError("Blob size is not a whole number of elements", path)
        self._values = np.frombuffer(data, dtype=dt)

    @property
    def size(self):
        return self._values.size

    def read(self, offset, shape):
        count = int(np.prod(shape)) if len(shape) else 1
        if offset < 0 or offset + count > self._values.size:
            raise CorruptFileError(
                f"Blob truncated: need elements [{offset}, {offset + count}) of {self._values.size}", self.path
            )
        return self._values[offset:offset + count].reshape(shape).copy()


def manifest_paths(path):
    """Resolve ``<stem>.json`` / ``<stem>.bin`` for a manifest path or directory."""
    path = Path(path)
    if path.suffix == ".json":
        return path, path.with_suffix(".bin")
    if path.suffix == ".bin":
        return path.with_suffix(".json"), path
    if path.is_dir() or not path.suffix:
        return path / "manifest.json", path / "samples.bin"
    return path.with_suffix(".json"), path.with_suffix(".bin")
