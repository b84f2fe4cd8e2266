"""
Artifact writer: CSV with '#' metadata header, JSON sidecars, legacy ASCII
VTK through meshio, and Matrix Market matrices. Every path is confined to
the run's output directory.
"""

import json
import hashlib
import logging
from importlib import metadata as importlib_metadata
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import meshio
import numpy as np
import pandas as pd
import scipy
import scipy.io
import sympy

from app.core.config import settings
from app.core.errors import ConfigError
from app.models.fields import DiscreteField, FieldKind
from app.models.geometry import Mesh

logger = logging.getLogger(__name__)

PARTIAL_RUN_MARKER = "PARTIAL_RUN"


def config_hash(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _meshio_version() -> str:
    try:
        return importlib_metadata.version("meshio")
    except importlib_metadata.PackageNotFoundError:
        return getattr(meshio, "__version__", "unknown")


def library_versions() -> Dict[str, str]:
    return {
        "robin_toolkit": settings.VERSION,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "sympy": sympy.__version__,
        "meshio": _meshio_version(),
    }


class ArtifactWriter:
    def __init__(self, out_dir, config_digest: str):
        self.out_dir = Path(out_dir).resolve()
        self.config_digest = config_digest
        self.written: List[str] = []
        self.out_dir.mkdir(parents=True, exist_ok=True)

    # ── Paths ──────────────────────────────────────────────────────

    def path(self, name: str) -> Path:
        target = (self.out_dir / name).resolve()
        if self.out_dir != target and self.out_dir not in target.parents:
            raise ConfigError(f"artifact {name!r} would be written outside {self.out_dir}")
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def _record(self, target: Path) -> str:
        rel = str(target.relative_to(self.out_dir))
        if rel not in self.written:
            self.written.append(rel)
        logger.debug(f"Wrote {target}")
        return rel

    def metadata(self) -> Dict[str, str]:
        meta = {"config_hash": self.config_digest}
        meta.update(library_versions())
        return meta

    def header_lines(self) -> List[str]:
        return [f"# {k}={v}" for k, v in self.metadata().items()]

    # ── Writers ────────────────────────────────────────────────────

    def write_csv(self, name: str, df: pd.DataFrame) -> str:
        target = self.path(name)
        body = df.to_csv(index=False, lineterminator="\n", float_format="%.12g")
        with open(target, "w", newline="\n") as fh:
            fh.write("\n".join(self.header_lines()) + "\n")
            fh.write(body)
        return self._record(target)

    def write_json(self, name: str, payload: dict) -> str:
        target = self.path(name)
        document = {"metadata": self.metadata(), **payload}
        with open(target, "w", newline="\n") as fh:
            json.dump(document, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        return self._record(target)

    def write_vtk(
        self,
        name: str,
        mesh: Mesh,
        fields: Iterable[DiscreteField] = (),
        names: Optional[Iterable[str]] = None,
    ) -> str:
        target = self.path(name)
        write_mesh_vtk(target, mesh, list(fields), list(names) if names is not None else None,
                       title=f"robin toolkit config_hash={self.config_digest}")
        return self._record(target)

    def write_matrix(self, name: str, matrix) -> str:
        target = self.path(name)
        scipy.io.mmwrite(str(target), matrix, comment=f"config_hash={self.config_digest}")
        return self._record(target)

    # ── Failure markers ────────────────────────────────────────────

    def mark_failed(self, stage: str, error: Exception) -> Path:
        target = self.path(PARTIAL_RUN_MARKER)
        with open(target, "w", newline="\n") as fh:
            fh.write(f"stage={stage}\n")
            fh.write(f"error={error.__class__.__name__}: {error}\n")
        logger.error(f"Run failed at stage {stage!r}; marker written to {target}")
        return target

    def clear_marker(self):
        marker = self.out_dir / PARTIAL_RUN_MARKER
        if marker.exists():
            marker.unlink()


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if hasattr(value, "model_dump"):
        return value.model_dump()
    raise TypeError(f"not JSON serialisable: {type(value).__name__}")


def _vertex_values(field: DiscreteField, n_vertices: int) -> np.ndarray:
    if field.kind == FieldKind.VELOCITY:
        ux, uy = field.components()
        return np.column_stack([ux[:n_vertices], uy[:n_vertices], np.zeros(n_vertices)])
    return field.coefficients[:n_vertices].copy()


VTK_HEADER = "# vtk DataFile Version 2.0"


def write_mesh_vtk(path, mesh: Mesh, fields=(), names=None, title: str = "robin toolkit") -> None:
    """Legacy ASCII VTK with triangles, boundary lines and a boundary_tag cell array."""
    n = mesh.n_vertices
    points = np.column_stack([mesh.vertices, np.zeros(n)])
    cells = [("triangle", mesh.triangles.astype(np.int64)), ("line", mesh.boundary_vertices.astype(np.int64))]
    cell_data = {
        "boundary_tag": [np.zeros(mesh.n_triangles, dtype=np.int32), mesh.boundary_tags.astype(np.int32)]
    }
    names = names or [f.kind.value for f in fields]
    point_data = {name: _vertex_values(f, n) for name, f in zip(names, fields)}
    vtk = meshio.Mesh(points=points, cells=cells, point_data=point_data, cell_data=cell_data)
    meshio.write(str(path), vtk, file_format="vtk42", binary=False)

    # meshio writes the 4.2 body, which uses no construct newer than 2.0
    with open(path, "r") as fh:
        lines = fh.read().split("\n")
    lines[0] = VTK_HEADER
    if len(lines) > 1:
        lines[1] = title[:255]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines))


def read_artifact_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")
