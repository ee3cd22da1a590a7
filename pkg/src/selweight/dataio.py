"""Dataset and summary ingestion plus result serialization.

Datasets are comma-delimited text with a header row.  A role map names the
columns playing each part: the binary outcome, the disease-model covariates,
the selection-model covariates, and optional selection/external indicators
with known external design probabilities.  Numbers are written back with 17
significant digits so round-trips preserve every double exactly.
"""

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DuplicateCellError,
    MissingColumnError,
    MissingNError,
    NonBinaryIndicatorError,
    NonNumericCellError,
    ProbabilitySumOutOfRangeError,
    ValidationError,
)
from .fitters import DesignMatrix
from .weights import PopulationSummary

MISSING_TOKENS = {"", "na", "nan", "null", "n/a"}

ROLE_KEYS = (
    "outcome",
    "disease_covariates",
    "selection_covariates",
    "selection_indicator",
    "external_indicator",
    "external_prob",
)


@dataclass
class ColumnRoleMap:
    """Mapping from model roles to dataset column names.

    Covariates shared by the disease and selection models appear in both
    lists; that is how the shared group is declared.
    """

    outcome: str
    disease_covariates: list
    selection_covariates: list
    selection_indicator: Optional[str] = None
    external_indicator: Optional[str] = None
    external_prob: Optional[str] = None

    def __post_init__(self):
        if not self.outcome:
            raise ValidationError("an outcome column is required")
        if not self.disease_covariates:
            raise ValidationError("at least one disease covariate is required")
        for label, names in (("disease_covariates", self.disease_covariates),
                             ("selection_covariates", self.selection_covariates)):
            if len(set(names)) != len(names):
                raise ValidationError(f"duplicate names in {label}")
        specials = [self.outcome, self.selection_indicator,
                    self.external_indicator, self.external_prob]
        specials = [s for s in specials if s]
        if len(set(specials)) != len(specials):
            raise ValidationError("indicator/outcome roles must name distinct columns")
        covariates = set(self.disease_covariates) | set(self.selection_covariates)
        clash = covariates & set(specials)
        if clash:
            raise ValidationError(f"columns {sorted(clash)} mapped to multiple roles")

    def mapped_columns(self):
        names = [self.outcome]
        names += list(self.disease_covariates)
        names += [c for c in self.selection_covariates if c not in names]
        for extra in (self.selection_indicator, self.external_indicator,
                      self.external_prob):
            if extra:
                names.append(extra)
        return names


def parse_role_map(path):
    """Read a key=value roles file; unknown keys are rejected."""
    values = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in ROLE_KEYS:
                raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ValidationError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = value.strip()
    lists = {
        k: [part.strip() for part in values[k].split(",") if part.strip()]
        for k in ("disease_covariates", "selection_covariates") if k in values
    }
    return ColumnRoleMap(
        outcome=values.get("outcome", ""),
        disease_covariates=lists.get("disease_covariates", []),
        selection_covariates=lists.get("selection_covariates", []),
        selection_indicator=values.get("selection_indicator") or None,
        external_indicator=values.get("external_indicator") or None,
        external_prob=values.get("external_prob") or None,
    )


@dataclass
class AnalysisSample:
    """Validated rectangular dataset with columns resolved by role."""

    columns: dict
    roles: ColumnRoleMap
    n_rows: int
    source: str = ""

    def column(self, name):
        return self.columns[name]

    @property
    def outcome(self):
        return self.columns[self.roles.outcome]

    def disease_design(self):
        cols = [np.ones(self.n_rows)]
        names = ["intercept"]
        for name in self.roles.disease_covariates:
            cols.append(self.columns[name])
            names.append(name)
        return DesignMatrix(np.column_stack(cols), names)

    def selection_design(self, include_outcome=False):
        cols = [np.ones(self.n_rows)]
        names = ["intercept"]
        for name in self.roles.selection_covariates:
            cols.append(self.columns[name])
            names.append(name)
        if include_outcome:
            cols.append(self.outcome)
            names.append(self.roles.outcome)
        return DesignMatrix(np.column_stack(cols), names)

    def external_probabilities(self):
        if not self.roles.external_prob:
            raise ValidationError("no external_prob column is mapped")
        return self.columns[self.roles.external_prob]


def _parse_cell(text, row_number, column):
    token = text.strip()
    if token.lower() in MISSING_TOKENS:
        raise NonNumericCellError(
            f"missing value at row {row_number}, column {column!r}"
        )
    try:
        return float(token)
    except ValueError:
        raise NonNumericCellError(
            f"non-numeric value {token!r} at row {row_number}, column {column!r}"
        ) from None


def load_dataset(path, roles, extra_columns=()):
    """Load and validate a delimited dataset against a role map.

    Binary roles (outcome, indicators) must be coded 0/1; any missing or
    non-numeric cell in a mapped column is an error naming the 1-based data
    row and the column.  ``extra_columns`` pulls in additional numeric
    columns beyond the role map (for example outcome-probability columns
    used by weight augmentation).
    """
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        wanted = list(roles.mapped_columns())
        wanted += [c for c in extra_columns if c not in wanted]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise MissingColumnError(f"{path}: missing columns {missing}")
        index = {c: header.index(c) for c in wanted}
        data = {c: [] for c in index}
        n_rows = 0
        for row_number, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ValidationError(
                    f"{path}: row {row_number} has {len(row)} fields, "
                    f"expected {len(header)}"
                )
            n_rows += 1
            for column, pos in index.items():
                data[column].append(_parse_cell(row[pos], row_number, column))
    if n_rows == 0:
        raise ValidationError(f"{path}: no data rows")

    columns = {c: np.asarray(v, dtype=float) for c, v in data.items()}
    binary_roles = [roles.outcome, roles.selection_indicator,
                    roles.external_indicator]
    for name in binary_roles:
        if name and not np.all(np.isin(columns[name], (0.0, 1.0))):
            bad = int(np.flatnonzero(~np.isin(columns[name], (0.0, 1.0)))[0]) + 1
            raise NonBinaryIndicatorError(
                f"{path}: column {name!r} must be coded 0/1 "
                f"(first offending data row {bad})"
            )
    return AnalysisSample(columns=columns, roles=roles, n_rows=n_rows,
                          source=str(path))


def load_population_summary(path, kind):
    """Load a population summary file of the given kind.

    ``joint_cells`` files have one row per cell: the discretized levels under
    their variable-name headers and a final ``probability`` column.  Cell
    probabilities may be renormalized when their total falls within one part
    in a thousand of 1; larger deviations are rejected.  ``marginal_means``
    files are two columns (name, value) and must include an ``N`` row.
    """
    if kind == "joint_cells":
        return _load_joint_cells(path)
    if kind == "marginal_means":
        return _load_marginal_means(path)
    raise ValidationError(f"unknown summary kind {kind!r}")


def _load_joint_cells(path):
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = [h.strip() for h in next(reader)]
        if len(header) < 2 or header[-1] != "probability":
            raise ValidationError(
                f"{path}: joint summary needs level columns plus a final "
                "'probability' column"
            )
        level_names = header[:-1]
        cells = {}
        for row_number, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ValidationError(
                    f"{path}: row {row_number} has {len(row)} fields, "
                    f"expected {len(header)}"
                )
            key = tuple(
                int(_parse_cell(cell, row_number, name))
                for cell, name in zip(row[:-1], level_names)
            )
            if key in cells:
                raise DuplicateCellError(
                    f"{path}: duplicate cell {key} at row {row_number}"
                )
            cells[key] = _parse_cell(row[-1], row_number, "probability")
    if not cells:
        raise ValidationError(f"{path}: no cells found")
    total = sum(cells.values())
    warnings = []
    if abs(total - 1.0) > 1e-9:
        if not (0.999 <= total <= 1.001):
            raise ProbabilitySumOutOfRangeError(
                f"{path}: cell probabilities sum to {total:.6f}, outside [0.999, 1.001]"
            )
        cells = {k: v / total for k, v in cells.items()}
        warnings.append(
            f"cell probabilities summed to {total:.6f}; renormalized to 1"
        )
    summary = PopulationSummary("joint_cells", cells=cells, names=level_names)
    summary.warnings.extend(warnings)
    return summary


def _load_marginal_means(path):
    names, means = [], []
    population_size = None
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = [h.strip() for h in next(reader)]
        if [h.lower() for h in header] != ["name", "value"]:
            raise ValidationError(
                f"{path}: marginal summary must have header 'name,value'"
            )
        for row_number, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise ValidationError(
                    f"{path}: row {row_number} has {len(row)} fields, expected 2"
                )
            name = row[0].strip()
            value = _parse_cell(row[1], row_number, "value")
            if name == "N":
                population_size = int(value)
            else:
                names.append(name)
                means.append(value)
    if population_size is None:
        raise MissingNError(f"{path}: no 'N' row with the population size")
    if not names:
        raise ValidationError(f"{path}: no marginal means found")
    return PopulationSummary("marginal_means", means=np.asarray(means),
                             names=names, population_size=population_size)


def format_number(value):
    """Serialize a number with 17 significant digits."""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.17g}"


@dataclass
class ResultTable:
    """Flat result rows with a fixed column order, writable as CSV or JSON."""

    column_names: list
    rows: list = field(default_factory=list)

    def append(self, **values):
        unknown = set(values) - set(self.column_names)
        if unknown:
            raise ValidationError(f"unknown result columns {sorted(unknown)}")
        if ("ci_lower" in values and "estimate" in values
                and "ci_upper" in values):
            if not (values["ci_lower"] <= values["estimate"] <= values["ci_upper"]):
                raise ValidationError(
                    "confidence interval does not bracket the estimate"
                )
        self.rows.append(values)

    def _formatted(self):
        for row in self.rows:
            yield [
                format_number(row[c]) if isinstance(row.get(c), (int, float, np.floating, np.integer))
                else str(row.get(c, ""))
                for c in self.column_names
            ]

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(self.column_names)
            writer.writerows(self._formatted())

    def write_json(self, path):
        # Hand-rolled so numeric fields carry the same 17-significant-digit
        # text as the CSV writer.
        lines = ["["]
        formatted = list(self._formatted())
        for i, (row, cells) in enumerate(zip(self.rows, formatted)):
            parts = []
            for name, cell in zip(self.column_names, cells):
                value = row.get(name)
                if isinstance(value, (int, float, np.floating, np.integer)):
                    if isinstance(value, (float, np.floating)) and not np.isfinite(value):
                        parts.append(f"{json.dumps(name)}: null")
                    else:
                        parts.append(f"{json.dumps(name)}: {cell}")
                else:
                    parts.append(f"{json.dumps(name)}: {json.dumps(cell)}")
            suffix = "," if i + 1 < len(formatted) else ""
            lines.append("  {" + ", ".join(parts) + "}" + suffix)
        lines.append("]")
        with open(path, "w", encoding="utf-8", newline="") as handle:
            handle.write("\n".join(lines) + "\n")

    def write(self, path, fmt):
        if fmt == "csv":
            self.write_csv(path)
        elif fmt == "json":
            self.write_json(path)
        else:
            raise ValidationError(f"unknown output format {fmt!r}")
