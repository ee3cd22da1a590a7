import json
import subprocess
import sys

import numpy as np
import pytest

import selweight as sw
from selweight.dataio import ResultTable, format_number


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def export_population(pop, mask, path, include_s=True):
    fields = {
        "d": pop.d, "z1": pop.z1, "z2": pop.z2, "w": pop.w,
        "s": pop.s, "s_ext": pop.s_ext, "pi_ext": pop.pi_ext,
    }
    if not include_s:
        fields.pop("s")
    names = list(fields)
    rows = [",".join(names)]
    idx = np.flatnonzero(mask)
    for i in idx:
        rows.append(",".join(format_number(float(fields[c][i]))
                             for c in names))
    write_lines(path, rows)


ROLES_LINES = [
    "outcome=d",
    "disease_covariates=z1,z2",
    "selection_covariates=z2,w",
    "selection_indicator=s",
    "external_indicator=s_ext",
    "external_prob=pi_ext",
]


@pytest.fixture
def roles_file(tmp_path):
    path = tmp_path / "roles.cfg"
    write_lines(path, ROLES_LINES)
    return path


# ---------------------------------------------------------------------------
# role maps


def test_parse_role_map(roles_file):
    roles = sw.parse_role_map(roles_file)
    assert roles.outcome == "d"
    assert roles.disease_covariates == ["z1", "z2"]
    assert roles.selection_covariates == ["z2", "w"]
    assert roles.external_prob == "pi_ext"


def test_parse_role_map_rejects_unknown_key(tmp_path):
    path = tmp_path / "roles.cfg"
    write_lines(path, ["outcome=d", "disease_covariates=z1", "shoe_size=9"])
    with pytest.raises(sw.ValidationError, match="unknown key"):
        sw.parse_role_map(path)


def test_role_map_rejects_role_clashes():
    with pytest.raises(sw.ValidationError):
        sw.ColumnRoleMap(outcome="d", disease_covariates=["d"],
                         selection_covariates=[])
    with pytest.raises(sw.ValidationError):
        sw.ColumnRoleMap(outcome="d", disease_covariates=["z", "z"],
                         selection_covariates=[])


# ---------------------------------------------------------------------------
# dataset loading


def simple_roles():
    return sw.ColumnRoleMap(outcome="D", disease_covariates=["Z1"],
                            selection_covariates=["W1"])


def test_load_small_dataset(tmp_path):
    path = tmp_path / "data.csv"
    write_lines(path, ["D,Z1,W1", "1,0.5,2.0", "0,-0.25,1.0", "1,0.125,0.5"])
    sample = sw.load_dataset(path, simple_roles())
    assert sample.n_rows == 3
    assert np.allclose(sample.outcome, [1.0, 0.0, 1.0])
    design = sample.disease_design()
    assert design.column_names == ["intercept", "Z1"]


def test_missing_value_error_names_row_and_column(tmp_path):
    path = tmp_path / "data.csv"
    write_lines(path, ["D,Z1,W1", "1,0.5,2.0", "0,-0.25,NA", "1,0.125,0.5"])
    with pytest.raises(sw.NonNumericCellError) as excinfo:
        sw.load_dataset(path, simple_roles())
    assert "row 2" in str(excinfo.value)
    assert "'W1'" in str(excinfo.value)


def test_missing_column_error(tmp_path):
    path = tmp_path / "data.csv"
    write_lines(path, ["D,Z1", "1,0.5"])
    with pytest.raises(sw.MissingColumnError):
        sw.load_dataset(path, simple_roles())


def test_non_binary_outcome_error(tmp_path):
    path = tmp_path / "data.csv"
    write_lines(path, ["D,Z1,W1", "2,0.5,1.0"])
    with pytest.raises(sw.NonBinaryIndicatorError):
        sw.load_dataset(path, simple_roles())


def test_round_trip_export_import_fit_identical(tmp_path, roles_file):
    cfg = sw.SimulationConfig(dag=2, setup=1, seed=21, n_population=4000)
    pop = sw.generate_population(cfg, 0)
    mask = pop.s == 1.0
    path = tmp_path / "internal.csv"
    export_population(pop, mask, path)
    sample = sw.load_dataset(path, sw.parse_role_map(roles_file))

    design_mem = sw.DesignMatrix(
        np.column_stack([np.ones(int(mask.sum())), pop.z1[mask],
                         pop.z2[mask]]), ["intercept", "z1", "z2"])
    fit_mem = sw.fit_weighted_logistic(design_mem, pop.d[mask])
    fit_file = sw.fit_weighted_logistic(sample.disease_design(),
                                        sample.outcome)
    assert np.max(np.abs(fit_mem.coefficients - fit_file.coefficients)) <= 1e-12


# ---------------------------------------------------------------------------
# summary loading


def test_load_joint_cells(tmp_path):
    path = tmp_path / "cells.csv"
    write_lines(path, ["d,w_bin,probability", "0,0,0.25", "0,1,0.25",
                       "1,0,0.3", "1,1,0.2"])
    summary = sw.load_population_summary(path, "joint_cells")
    assert summary.kind == "joint_cells"
    assert summary.cells[(1, 0)] == pytest.approx(0.3)
    assert summary.names == ["d", "w_bin"]
    assert not summary.warnings


def test_joint_cells_renormalized_with_warning(tmp_path):
    path = tmp_path / "cells.csv"
    write_lines(path, ["d,probability", "0,0.5002", "1,0.5002"])
    summary = sw.load_population_summary(path, "joint_cells")
    assert sum(summary.cells.values()) == pytest.approx(1.0, abs=1e-12)
    assert summary.warnings


def test_joint_cells_sum_out_of_range(tmp_path):
    path = tmp_path / "cells.csv"
    write_lines(path, ["d,probability", "0,0.6", "1,0.6"])
    with pytest.raises(sw.ProbabilitySumOutOfRangeError):
        sw.load_population_summary(path, "joint_cells")


def test_joint_cells_duplicate_rejected(tmp_path):
    path = tmp_path / "cells.csv"
    write_lines(path, ["d,probability", "0,0.5", "0,0.5"])
    with pytest.raises(sw.DuplicateCellError):
        sw.load_population_summary(path, "joint_cells")


def test_marginal_means_requires_population_size(tmp_path):
    path = tmp_path / "marg.csv"
    write_lines(path, ["name,value", "z2,0.1", "w,0.0"])
    with pytest.raises(sw.MissingNError):
        sw.load_population_summary(path, "marginal_means")
    write_lines(path, ["name,value", "z2,0.1", "w,0.0", "N,1000"])
    summary = sw.load_population_summary(path, "marginal_means")
    assert summary.population_size == 1000
    assert summary.names == ["z2", "w"]


# ---------------------------------------------------------------------------
# result tables


def test_result_table_interval_invariant():
    table = ResultTable(["method", "parameter", "estimate", "std_error",
                         "ci_lower", "ci_upper"])
    with pytest.raises(sw.ValidationError):
        table.append(method="pl", parameter="z1", estimate=2.0,
                     std_error=0.1, ci_lower=0.0, ci_upper=1.0)
    table.append(method="pl", parameter="z1", estimate=0.5, std_error=0.1,
                 ci_lower=0.3, ci_upper=0.7)
    assert len(table.rows) == 1


def test_result_table_serialization_17_digits(tmp_path):
    table = ResultTable(["name", "value"])
    table.append(name="x", value=1.0 / 3.0)
    csv_path = tmp_path / "out.csv"
    json_path = tmp_path / "out.json"
    table.write_csv(csv_path)
    table.write_json(json_path)
    text = csv_path.read_text()
    assert "0.33333333333333331" in text
    parsed = json.loads(json_path.read_text())
    assert parsed[0]["value"] == 1.0 / 3.0


# ---------------------------------------------------------------------------
# command-line interface


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "selweight.cli", *args],
                          capture_output=True, text=True)


def test_cli_simulate_deterministic_across_threads(tmp_path):
    outs = []
    for threads, name in ((1, "a.csv"), (2, "b.csv")):
        out = tmp_path / name
        result = run_cli("simulate", "--dag", "1", "--setup", "1",
                         "--replications", "20", "--seed", "7",
                         "--population-size", "8000",
                         "--threads", str(threads),
                         "--out", str(out), "--format", "csv")
        assert result.returncode == 0, result.stderr
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_cli_simulate_json_mirrors_csv(tmp_path):
    csv_out = tmp_path / "study.csv"
    json_out = tmp_path / "study.json"
    for fmt, out in (("csv", csv_out), ("json", json_out)):
        result = run_cli("simulate", "--dag", "1", "--setup", "1",
                         "--replications", "6", "--seed", "3",
                         "--population-size", "5000", "--method",
                         "unweighted,cl", "--out", str(out),
                         "--format", fmt)
        assert result.returncode == 0, result.stderr
    rows = json.loads(json_out.read_text())
    header, *lines = csv_out.read_text().strip().splitlines()
    assert header.split(",")[0] == "method"
    assert len(rows) == len(lines)
    assert rows[0]["method"] == "unweighted"
    assert rows[0]["rmse_relative"] == 1.0


def test_cli_fit_unweighted_shows_selection_bias_direction(tmp_path, roles_file):
    cfg = sw.SimulationConfig(dag=2, setup=1, seed=31)
    pop = sw.generate_population(cfg, 0)
    data = tmp_path / "internal.csv"
    export_population(pop, pop.s == 1.0, data)
    out = tmp_path / "fit.csv"
    result = run_cli("fit", "--method", "unweighted", "--data", str(data),
                     "--roles", str(roles_file), "--out", str(out))
    assert result.returncode == 0, result.stderr
    rows = {line.split(",")[1]: line.split(",")
            for line in out.read_text().strip().splitlines()[1:]}
    estimate = float(rows["z1"][2])
    # Covariate-driven selection biases the z1 coefficient downward.
    assert estimate < 0.5
    lower, upper = float(rows["z1"][4]), float(rows["z1"][5])
    assert lower <= estimate <= upper


def test_cli_fit_pl_close_to_truth(tmp_path, roles_file):
    cfg = sw.SimulationConfig(dag=2, setup=1, seed=31)
    pop = sw.generate_population(cfg, 0)
    data = tmp_path / "internal.csv"
    ext = tmp_path / "external.csv"
    export_population(pop, pop.s == 1.0, data)
    export_population(pop, pop.s_ext == 1.0, ext)
    out = tmp_path / "fit.csv"
    result = run_cli("fit", "--method", "pl", "--data", str(data),
                     "--external-data", str(ext), "--roles", str(roles_file),
                     "--include-outcome-in-selection",
                     "--out", str(out))
    assert result.returncode == 0, result.stderr
    rows = {line.split(",")[1]: line.split(",")
            for line in out.read_text().strip().splitlines()[1:]}
    for name in ("z1", "z2"):
        estimate = float(rows[name][2])
        se = float(rows[name][3])
        assert abs(estimate - 0.5) <= 4 * se


def test_cli_weights_cl_calibration_residual(tmp_path, roles_file):
    cfg = sw.SimulationConfig(dag=3, setup=1, seed=17, n_population=20_000)
    pop = sw.generate_population(cfg, 0)
    mask = pop.s == 1.0
    data = tmp_path / "internal.csv"
    export_population(pop, mask, data)
    marg = tmp_path / "marginals.csv"
    write_lines(marg, ["name,value",
                       f"z2,{format_number(pop.z2.mean())}",
                       f"w,{format_number(pop.w.mean())}",
                       f"d,{format_number(pop.d.mean())}",
                       f"N,{pop.n}"])
    out = tmp_path / "weights.csv"
    result = run_cli("weights", "--method", "cl", "--data", str(data),
                     "--summary", str(marg), "--roles", str(roles_file),
                     "--include-outcome-in-selection", "--out", str(out))
    assert result.returncode == 0, result.stderr
    pi = np.array([float(line.split(",")[1])
                   for line in out.read_text().strip().splitlines()[1:]])
    x = np.column_stack([np.ones(int(mask.sum())), pop.z2[mask],
                         pop.w[mask], pop.d[mask]])
    totals = np.array([pop.n, pop.z2.sum(), pop.w.sum(), pop.d.sum()])
    residual = x.T @ (1.0 / pi) - totals
    assert np.max(np.abs(residual)) <= 1e-6 * pop.n


def test_cli_weights_winsorize_and_augment(tmp_path, roles_file):
    cfg = sw.SimulationConfig(dag=2, setup=1, seed=13, n_population=8000)
    pop = sw.generate_population(cfg, 0)
    mask = pop.s == 1.0
    n = int(mask.sum())
    data = tmp_path / "internal.csv"
    fields = ["d", "z1", "z2", "w", "s", "s_ext", "pi_ext", "p_pop", "p_int"]
    rng = np.random.default_rng(5)
    p_pop = rng.uniform(0.2, 0.4, size=n)
    p_int = rng.uniform(0.3, 0.5, size=n)
    rows = [",".join(fields)]
    idx = np.flatnonzero(mask)
    for j, i in enumerate(idx):
        vals = [pop.d[i], pop.z1[i], pop.z2[i], pop.w[i], pop.s[i],
                pop.s_ext[i], pop.pi_ext[i], p_pop[j], p_int[j]]
        rows.append(",".join(format_number(float(v)) for v in vals))
    write_lines(data, rows)
    ext = tmp_path / "external.csv"
    export_population(pop, pop.s_ext == 1.0, ext)
    out = tmp_path / "weights.csv"
    result = run_cli("weights", "--method", "pl", "--data", str(data),
                     "--external-data", str(ext), "--roles", str(roles_file),
                     "--winsorize", "0.025", "0.975",
                     "--augment-outcome", "p_pop", "p_int",
                     "--out", str(out))
    assert result.returncode == 0, result.stderr
    pi = np.array([float(line.split(",")[1])
                   for line in out.read_text().strip().splitlines()[1:]])
    assert np.all((pi > 0) & (pi <= 1))


def test_cli_simulate_config_file(tmp_path):
    cfg_file = tmp_path / "scenario.cfg"
    write_lines(cfg_file, ["dag=1", "setup=1", "replications=4", "seed=5",
                           "n_population=4000", "theta=-2,0.5,0.5"])
    out_a = tmp_path / "a.csv"
    result = run_cli("simulate", "--config", str(cfg_file),
                     "--method", "unweighted", "--out", str(out_a))
    assert result.returncode == 0, result.stderr
    # explicit flags override the file
    out_b = tmp_path / "b.csv"
    result = run_cli("simulate", "--config", str(cfg_file), "--seed", "5",
                     "--method", "unweighted", "--out", str(out_b))
    assert result.returncode == 0, result.stderr
    assert out_a.read_bytes() == out_b.read_bytes()


def test_cli_simulate_config_rejects_unknown_key(tmp_path):
    cfg_file = tmp_path / "scenario.cfg"
    write_lines(cfg_file, ["dag=1", "setup=1", "volume=11"])
    result = run_cli("simulate", "--config", str(cfg_file),
                     "--out", str(tmp_path / "x.csv"))
    assert result.returncode == 2
    assert "unknown key" in result.stderr


def test_cli_simulate_requires_scenario(tmp_path):
    result = run_cli("simulate", "--out", str(tmp_path / "x.csv"))
    assert result.returncode == 2


def test_cli_validation_failure_exit_code(tmp_path, roles_file):
    missing = tmp_path / "data.csv"
    write_lines(missing, ["d,z1", "1,0.5"])
    out = tmp_path / "out.csv"
    result = run_cli("fit", "--method", "unweighted", "--data", str(missing),
                     "--roles", str(roles_file), "--out", str(out))
    assert result.returncode == 2
    assert result.stderr.startswith("error: validation:")


def test_cli_convergence_failure_exit_code(tmp_path, roles_file):
    # Infeasible calibration totals surface as a convergence failure.
    cfg = sw.SimulationConfig(dag=1, setup=1, seed=19, n_population=4000)
    pop = sw.generate_population(cfg, 0)
    data = tmp_path / "internal.csv"
    export_population(pop, pop.s == 1.0, data)
    marg = tmp_path / "marginals.csv"
    write_lines(marg, ["name,value", "z2,-50", "w,-50", "d,0.5",
                       f"N,{pop.n}"])
    out = tmp_path / "weights.csv"
    result = run_cli("weights", "--method", "cl", "--data", str(data),
                     "--summary", str(marg), "--roles", str(roles_file),
                     "--include-outcome-in-selection", "--out", str(out))
    assert result.returncode == 3
    assert result.stderr.startswith("error: convergence:")
