import os
import shutil
import tempfile
from pathlib import Path


def atomic_write_bytes(path, data: bytes):
    """Write to a temp file, then rename, so readers never see a partial file.

    The temp file sits next to ``path`` unless ``FMRIDGM_TMPDIR`` names
    another directory.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_dir = os.environ.get("FMRIDGM_TMPDIR") or path.parent
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=tmp_dir)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        try:
            os.replace(tmp, path)
        except OSError:
            # temp dir on another filesystem
            shutil.move(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def format_float(x: float) -> str:
    # 17 significant digits round-trip every float64
    return "%.17g" % x
