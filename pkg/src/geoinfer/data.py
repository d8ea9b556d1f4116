"""Dataset fixtures, CSV ingestion, column schemas and the Gaussian oracle benchmark."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

INDEX_FEATURE = "index_feature"
MECHANICAL_TARGET = "mechanical_target"
CLASS_LABEL = "class_label"
ROLES = (INDEX_FEATURE, MECHANICAL_TARGET, CLASS_LABEL)

STD_FLOOR = 1e-9

SOIL_CLASSES = ("Clay", "Sand")
SOIL_COEFFICIENTS = {"Clay": 100.0, "Sand": 80.0}


class DataError(ValueError):
    """Base class for data-layer failures."""


class DomainError(DataError):
    pass


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, row: int, column: str):
        super().__init__(f"{message} (row {row}, column {column!r})")
        self.row = row
        self.column = column


class UsageError(DataError):
    pass


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    role: str
    units: str = ""

    def __post_init__(self):
        if self.role not in ROLES:
            raise SchemaError(f"unknown role {self.role!r} for column {self.name!r}")

    def to_dict(self) -> dict:
        return {"name": self.name, "role": self.role, "units": self.units}

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSchema":
        return cls(name=d["name"], role=d["role"], units=d.get("units", ""))


def _check_schema(schema: Sequence[ColumnSchema]) -> None:
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise SchemaError(f"duplicate column names in schema: {names}")
    if sum(c.role == CLASS_LABEL for c in schema) > 1:
        raise SchemaError("at most one class_label column is supported")


@dataclass(frozen=True, eq=False)
class DataTable:
    """Rows of samples under a column schema.

    ``values`` is ``n_rows x n_cols``. A class-label column holds indices into
    ``classes``; missing cells are flagged in ``missing`` and stored as NaN.
    """

    schema: tuple[ColumnSchema, ...]
    values: np.ndarray
    missing: np.ndarray
    classes: tuple[str, ...] = ()

    def __post_init__(self):
        schema = tuple(self.schema)
        _check_schema(schema)
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim != 2 or values.shape[1] != len(schema):
            raise SchemaError(f"values shape {values.shape} does not match {len(schema)} schema columns")
        missing = np.array(self.missing, dtype=bool, copy=True)
        if missing.shape != values.shape:
            raise SchemaError("missing mask shape differs from values shape")
        values[missing] = np.nan
        if not np.all(np.isfinite(values[~missing])):
            raise DataError("non-missing cells must be finite")
        values.setflags(write=False)
        missing.setflags(write=False)
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing", missing)
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.schema]

    def column_index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown column {name!r}") from None

    def columns_with_role(self, role: str) -> list[str]:
        return [c.name for c in self.schema if c.role == role]

    @property
    def index_features(self) -> list[str]:
        return self.columns_with_role(INDEX_FEATURE)

    @property
    def targets(self) -> list[str]:
        return self.columns_with_role(MECHANICAL_TARGET)

    @property
    def label_column(self) -> str | None:
        labels = self.columns_with_role(CLASS_LABEL)
        return labels[0] if labels else None

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.column_index(name)]

    def columns(self, names: Sequence[str]) -> np.ndarray:
        return self.values[:, [self.column_index(n) for n in names]]

    def labels(self) -> list[str]:
        """Class label strings per row (requires a class_label column)."""
        col = self.label_column
        if col is None:
            raise SchemaError("table has no class_label column")
        return [self.classes[int(v)] for v in self.column(col)]

    def is_fully_observed(self, names: Sequence[str] | None = None) -> bool:
        if names is None:
            return not self.missing.any()
        idx = [self.column_index(n) for n in names]
        return not self.missing[:, idx].any()

    def with_values(self, values: np.ndarray, missing: np.ndarray | None = None) -> "DataTable":
        return DataTable(self.schema, values, self.missing if missing is None else missing, self.classes)

    def equals(self, other: "DataTable") -> bool:
        return (
            self.schema == other.schema
            and self.classes == other.classes
            and np.array_equal(self.missing, other.missing)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    def to_dict(self) -> dict:
        return {
            "schema": [c.to_dict() for c in self.schema],
            "classes": list(self.classes),
            "values": [[None if m else float(v) for v, m in zip(row, mrow)] for row, mrow in zip(self.values, self.missing)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataTable":
        schema = tuple(ColumnSchema.from_dict(c) for c in d["schema"])
        rows = d["values"]
        missing = np.array([[v is None for v in row] for row in rows], dtype=bool).reshape(len(rows), len(schema))
        values = np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=float).reshape(
            len(rows), len(schema)
        )
        return cls(schema, values, missing, tuple(d.get("classes", ())))


def make_table(schema: Sequence[ColumnSchema], values, classes: Sequence[str] = ()) -> DataTable:
    """Build a table from a value matrix where NaN marks a missing cell."""
    values = np.asarray(values, dtype=float)
    return DataTable(tuple(schema), values, np.isnan(values), tuple(classes))


# ---------------------------------------------------------------------------
# Soil classification fixture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SoilSample:
    n_value: float
    vs: float
    soil: str


def vs_from_n(n: float, soil: str) -> float:
    """Shear-wave velocity (m/s) from SPT blow count via the class-specific cube-root curve."""
    if soil not in SOIL_COEFFICIENTS:
        raise DomainError(f"unknown soil class {soil!r}")
    if not (isinstance(n, (int, float, np.floating, np.integer)) and math.isfinite(n) and n > 0):
        raise DomainError(f"blow count must be positive and finite, got {n!r}")
    return SOIL_COEFFICIENTS[soil] * float(np.cbrt(float(n)))


# Stored verbatim so golden tests catch formula regressions.
_TRAIN_ROWS = [
    (1, 100.000, "Clay"), (2, 125.992, "Clay"), (7, 191.293, "Clay"), (12, 228.943, "Clay"),
    (15, 246.621, "Clay"), (16, 251.984, "Clay"), (17, 257.128, "Clay"), (18, 262.074, "Clay"),
    (20, 271.442, "Clay"), (27, 300.000, "Clay"), (29, 307.232, "Clay"), (29, 245.785, "Sand"),
    (42, 278.082, "Sand"), (43, 280.272, "Sand"), (47, 288.706, "Sand"), (48, 290.739, "Sand"),
]
_TEST_ROWS = [
    (4, 158.740, "Clay"), (5, 170.998, "Clay"), (9, 208.008, "Clay"), (10, 215.443, "Clay"),
    (11, 222.398, "Clay"), (28, 303.659, "Clay"), (38, 336.198, "Clay"), (14, 192.811, "Sand"),
    (25, 233.921, "Sand"), (27, 240.000, "Sand"), (30, 248.579, "Sand"), (33, 256.603, "Sand"),
    (38, 268.958, "Sand"), (40, 273.596, "Sand"), (45, 284.551, "Sand"), (49, 292.744, "Sand"),
]

SOIL_SCHEMA = (
    ColumnSchema("N", INDEX_FEATURE, "blows"),
    ColumnSchema("Vs", INDEX_FEATURE, "m/s"),
    ColumnSchema("soil", CLASS_LABEL, ""),
)


def soil_samples(split: str) -> list[SoilSample]:
    rows = {"train": _TRAIN_ROWS, "test": _TEST_ROWS}[split]
    return [SoilSample(float(n), vs, soil) for n, vs, soil in rows]


def soil_table(samples: Iterable[SoilSample]) -> DataTable:
    samples = list(samples)
    values = np.array([[s.n_value, s.vs, SOIL_CLASSES.index(s.soil)] for s in samples], dtype=float)
    return DataTable(SOIL_SCHEMA, values, np.zeros(values.shape, dtype=bool), SOIL_CLASSES)


def builtin_soil_dataset() -> tuple[DataTable, DataTable]:
    """The 16 + 16 soil samples, Clay first then Sand, ascending N within class."""
    return soil_table(soil_samples("train")), soil_table(soil_samples("test"))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _format_cell(value: float) -> str:
    return repr(float(value))


def table_to_csv(table: DataTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.names)
    label = table.label_column
    label_idx = table.column_index(label) if label else -1
    for row, mrow in zip(table.values, table.missing):
        cells = []
        for j, (v, m) in enumerate(zip(row, mrow)):
            if m:
                cells.append("")
            elif j == label_idx:
                cells.append(table.classes[int(v)])
            else:
                cells.append(_format_cell(v))
        writer.writerow(cells)
    return buf.getvalue()


def write_csv(table: DataTable, path) -> None:
    Path(path).write_text(table_to_csv(table), encoding="utf-8")


def parse_csv(text: str, schema: Sequence[ColumnSchema], classes: Sequence[str] = ()) -> DataTable:
    schema = tuple(schema)
    _check_schema(schema)
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("CSV is empty; a header row is required") from None
    expected = [c.name for c in schema]
    if header != expected:
        raise SchemaError(f"CSV header {header} does not match schema columns {expected}")
    label_idx = next((j for j, c in enumerate(schema) if c.role == CLASS_LABEL), -1)
    registry = list(classes)
    values, missing = [], []
    for i, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != len(schema):
            raise ParseError(f"expected {len(schema)} cells, found {len(row)}", i, "*")
        vrow, mrow = [], []
        for j, cell in enumerate(row):
            if cell == "":
                vrow.append(np.nan)
                mrow.append(True)
                continue
            mrow.append(False)
            if j == label_idx:
                if cell not in registry:
                    if classes:
                        raise ParseError(f"unknown class label {cell!r}", i, schema[j].name)
                    registry.append(cell)
                vrow.append(float(registry.index(cell)))
                continue
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"cannot parse {cell!r} as a number", i, schema[j].name) from None
            if not math.isfinite(v):
                raise ParseError(f"non-finite value {cell!r}", i, schema[j].name)
            vrow.append(v)
        values.append(vrow)
        missing.append(mrow)
    if label_idx >= 0 and not classes:
        # deterministic registry independent of row order
        order = sorted(registry)
        remap = {k: float(order.index(name)) for k, name in enumerate(registry)}
        for vrow, mrow in zip(values, missing):
            if not mrow[label_idx]:
                vrow[label_idx] = remap[int(vrow[label_idx])]
        registry = order
    arr = np.array(values, dtype=float).reshape(len(values), len(schema))
    mask = np.array(missing, dtype=bool).reshape(len(values), len(schema))
    return DataTable(schema, arr, mask, tuple(registry))


def load_csv(path, schema: Sequence[ColumnSchema], classes: Sequence[str] = ()) -> DataTable:
    """Read a UTF-8 CSV; empty cells become missing, "NaN"/"NA" are rejected."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return parse_csv(path.read_text(encoding="utf-8"), schema, classes)


def load_schema(path) -> tuple[ColumnSchema, ...]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(raw, dict):
        raw = raw["schema"]
    schema = tuple(ColumnSchema.from_dict(c) for c in raw)
    _check_schema(schema)
    return schema


def dump_schema(schema: Sequence[ColumnSchema]) -> str:
    return json.dumps([c.to_dict() for c in schema], indent=2) + "\n"


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StandardizationStats:
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std


def fit_standardization(train: DataTable, columns: Sequence[str] | None = None) -> StandardizationStats:
    """Population mean/std per column, std floored at ``STD_FLOOR``."""
    columns = list(train.names if columns is None else columns)
    if train.n_rows == 0:
        raise DataError("cannot standardize an empty table")
    if not train.is_fully_observed(columns):
        raise DataError("standardization columns must be fully observed")
    x = train.columns(columns)
    return standardization_from_matrix(x, columns)


def standardization_from_matrix(x: np.ndarray, names: Sequence[str]) -> StandardizationStats:
    x = np.asarray(x, dtype=float)
    if x.shape[0] == 0:
        raise DataError("cannot standardize zero rows")
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    return StandardizationStats(tuple(names), mean, std)


# ---------------------------------------------------------------------------
# Gaussian oracle benchmark
# ---------------------------------------------------------------------------

ORACLE_INDEX = ("S_r", "gamma_t", "e", "LL", "PL", "w")
ORACLE_TARGETS = ("s_u", "E_u", "sigma_p", "C_c", "C_v")
ORACLE_SCHEMA = tuple(ColumnSchema(n, INDEX_FEATURE) for n in ORACLE_INDEX) + tuple(
    ColumnSchema(n, MECHANICAL_TARGET) for n in ORACLE_TARGETS
)

# Standardized units (unit variances), so the joint covariance is a correlation matrix.
# Each coupled target loads on exactly one index property; C_v is nearly independent.
_ORACLE_CORRELATIONS = {
    ("e", "w"): 0.4,
    ("LL", "PL"): 0.4,
    ("s_u", "E_u"): 0.75,
    ("s_u", "sigma_p"): 0.6,
    ("s_u", "C_c"): 0.4,
    ("E_u", "sigma_p"): 0.5,
    ("E_u", "C_c"): 0.4,
    ("sigma_p", "C_c"): 0.5,
    ("s_u", "S_r"): 0.3,
    ("E_u", "gamma_t"): 0.3,
    ("sigma_p", "w"): -0.4,
    ("C_c", "LL"): 0.5,
    ("C_v", "C_c"): 0.05,
}
_ORACLE_MEAN = (0.5, -0.25, 0.0, 1.0, -0.5, 0.25, 1.5, -1.0, 0.75, 0.0, 2.0)

# Which single index property each coupled target depends on directly.
ORACLE_TARGET_DRIVERS = {"s_u": "S_r", "E_u": "gamma_t", "sigma_p": "w", "C_c": "LL"}
ORACLE_COUPLED_TARGETS = ("s_u", "E_u", "sigma_p", "C_c")


def oracle_joint_mean() -> np.ndarray:
    return np.array(_ORACLE_MEAN, dtype=float)


def oracle_joint_cov() -> np.ndarray:
    names = ORACLE_INDEX + ORACLE_TARGETS
    cov = np.eye(len(names))
    for (a, b), r in _ORACLE_CORRELATIONS.items():
        i, j = names.index(a), names.index(b)
        cov[i, j] = cov[j, i] = r
    return cov


@dataclass(frozen=True, eq=False)
class OracleBenchmark:
    train: DataTable
    test: DataTable
    truth: DataTable
    joint_mean: np.ndarray
    joint_cov: np.ndarray
    seed: int

    def to_dict(self) -> dict:
        return {
            "schema": [c.to_dict() for c in self.train.schema],
            "train": self.train.to_dict(),
            "test": self.test.to_dict(),
            "truth": self.truth.to_dict(),
            "joint_mean": self.joint_mean.tolist(),
            "joint_cov": self.joint_cov.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OracleBenchmark":
        return cls(
            train=DataTable.from_dict(d["train"]),
            test=DataTable.from_dict(d["test"]),
            truth=DataTable.from_dict(d["truth"]),
            joint_mean=np.asarray(d["joint_mean"], dtype=float),
            joint_cov=np.asarray(d["joint_cov"], dtype=float),
            seed=int(d["seed"]),
        )


def generate_oracle_benchmark(seed: int, n_train: int = 500, n_test: int = 40, missing_rate: float = 0.5) -> OracleBenchmark:
    """Sample train/test tables from the fixed 11-dimensional Gaussian and mask test targets."""
    if n_train < 50:
        raise UsageError(f"n_train must be >= 50, got {n_train}")
    if n_test < 1:
        raise UsageError(f"n_test must be >= 1, got {n_test}")
    if not 0.0 < missing_rate < 1.0:
        raise UsageError(f"missing_rate must lie in (0, 1), got {missing_rate}")
    mean = oracle_joint_mean()
    cov = oracle_joint_cov()
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("oracle covariance is not positive definite") from exc
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_train + n_test, len(mean)))
    x = mean + z @ chol.T
    train_x, test_x = x[:n_train], x[n_train:]
    n_index = len(ORACLE_INDEX)
    mask = np.zeros(test_x.shape, dtype=bool)
    mask[:, n_index:] = rng.random((n_test, len(ORACLE_TARGETS))) < missing_rate
    schema = ORACLE_SCHEMA
    no_missing = np.zeros(train_x.shape, dtype=bool)
    return OracleBenchmark(
        train=DataTable(schema, train_x, no_missing),
        test=DataTable(schema, test_x, mask),
        truth=DataTable(schema, test_x, np.zeros(test_x.shape, dtype=bool)),
        joint_mean=mean,
        joint_cov=cov,
        seed=int(seed),
    )


def gaussian_conditional_mean(mean: np.ndarray, cov: np.ndarray, x: np.ndarray, observed: np.ndarray, target: int) -> float:
    """E[x_target | x_observed] for a joint Gaussian, via the Schur complement."""
    observed = np.asarray(observed, dtype=bool)
    if observed[target]:
        raise UsageError("target coordinate is observed")
    obs = np.flatnonzero(observed)
    if obs.size == 0:
        return float(mean[target])
    cross = cov[target, obs]
    gain = np.linalg.solve(cov[np.ix_(obs, obs)], x[obs] - mean[obs])
    return float(mean[target] + cross @ gain)


def analytic_conditional_mean(oracle: OracleBenchmark, row_index: int, target: str) -> float:
    test = oracle.test
    j = test.column_index(target)
    if not test.missing[row_index, j]:
        raise UsageError(f"{target!r} is observed in row {row_index}")
    observed = ~test.missing[row_index]
    x = oracle.truth.values[row_index]
    return gaussian_conditional_mean(oracle.joint_mean, oracle.joint_cov, x, observed, j)
