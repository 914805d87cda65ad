"""File output helpers: atomic writes and digest-stamped CSVs."""
from __future__ import annotations

import contextlib
import csv
import io
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence


@contextlib.contextmanager
def atomic_path(path):
    """Yield a temporary path next to ``path``; rename over it on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_text(path, text: str):
    with atomic_path(path) as tmp:
        Path(tmp).write_text(text)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], digest: str | None = None):
    buf = io.StringIO()
    if digest:
        buf.write(f"# config_sha256={digest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    write_text(path, buf.getvalue())


def read_csv(path) -> tuple[list[str] | None, list[list[str]]]:
    """Rows of a CSV, skipping ``#`` comments; the first row is a header if non-numeric."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        return None, []
    try:
        [float(v) for v in rows[0]]
        return None, rows
    except ValueError:
        return rows[0], rows[1:]
