"""Run manifests, table writers, and figure rendering for the CLI.

Every emitted artifact embeds a RunManifest (command, config path, seed,
content hash of the inputs, timestamp, tool version, schema version).
Tables go out as CSV or JSON plus a whitespace-delimited .dat twin for
external plotting tools, and each report renders a PNG figure alongside.
Output bytes are reproducible for identical config + seed except for the
timestamp field.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import __version__

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RunManifest:
    command: str
    config_path: str
    seed: int
    content_hash: str
    timestamp: str
    tool_version: str
    schema_version: int = SCHEMA_VERSION


def content_hash(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(len(chunk).to_bytes(8, "little"))
        h.update(chunk)
    return h.hexdigest()


def make_manifest(command: str, config_path: str | None, seed: int,
                  *input_chunks: bytes) -> RunManifest:
    return RunManifest(
        command=command,
        config_path=str(config_path) if config_path else "",
        seed=int(seed),
        content_hash=content_hash(*input_chunks),
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        tool_version=__version__,
    )


def _format_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ReportWriter:
    """Writes one command's artifacts into an output directory."""

    def __init__(self, out_dir, manifest: RunManifest, fmt: str = "csv",
                 plots: bool = True):
        if fmt not in ("csv", "json"):
            raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.manifest = manifest
        self.fmt = fmt
        self.plots = plots
        self.written: list[Path] = []
        self._write_text("manifest.json",
                         json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")

    def _write_text(self, name: str, text: str) -> Path:
        path = self.out_dir / name
        path.write_text(text, encoding="utf-8")
        self.written.append(path)
        return path

    def table(self, name: str, columns: list[str], rows: list[dict]) -> list[Path]:
        """Emit a table as .csv or .json plus the plot-ready .dat twin."""
        paths = []
        if self.fmt == "csv":
            buf = io.StringIO()
            for key, value in sorted(asdict(self.manifest).items()):
                buf.write(f"# {key}: {value}\n")
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_format_cell(row[c]) for c in columns])
            paths.append(self._write_text(f"{name}.csv", buf.getvalue()))
        else:
            doc = {
                "manifest": asdict(self.manifest),
                "columns": columns,
                "rows": [{c: row[c] for c in columns} for row in rows],
            }
            paths.append(self._write_text(f"{name}.json",
                                          json.dumps(doc, indent=2, sort_keys=True) + "\n"))
        dat = io.StringIO()
        dat.write("# " + " ".join(columns) + "\n")
        for row in rows:
            dat.write(" ".join(_format_cell(row[c]) for c in columns) + "\n")
        paths.append(self._write_text(f"{name}.dat", dat.getvalue()))
        return paths

    def record(self, name: str, payload: dict) -> Path:
        """Emit a nested JSON record with the manifest embedded."""
        doc = {"manifest": asdict(self.manifest), **payload}
        return self._write_text(f"{name}.json",
                                json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def figure(self, name: str, draw) -> Path | None:
        """Render a figure via draw(ax) and save it next to the tables."""
        if not self.plots:
            return None
        fig, ax = plt.subplots(figsize=(7.0, 4.5))
        draw(ax)
        fig.tight_layout()
        path = self.out_dir / f"{name}.png"
        fig.savefig(path, dpi=130)
        plt.close(fig)
        self.written.append(path)
        return path

    def multi_figure(self, name: str, n_axes: int, draw) -> Path | None:
        if not self.plots:
            return None
        fig, axes = plt.subplots(1, n_axes, figsize=(5.5 * n_axes, 4.2))
        draw(axes)
        fig.tight_layout()
        path = self.out_dir / f"{name}.png"
        fig.savefig(path, dpi=130)
        plt.close(fig)
        self.written.append(path)
        return path
