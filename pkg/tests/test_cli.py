import csv
import io
import json
from pathlib import Path

import pytest

from src.main import SCHEMAS, main
from src.schemas.model_spec import ModelSpec
from src.schemas.report import BoundReport, CheckLedger, CrbReport, FisherReport, SweepRow

SPECS_DIR = Path(__file__).resolve().parent.parent / "specs"
SCHEMAS_DIR = SPECS_DIR.parent / "schemas"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def spec_document(name):
    return json.loads((SPECS_DIR / name).read_text(encoding="utf-8"))


def test_fisher_bernoulli_information(capsys):
    code, out, _ = run(capsys, "fisher", SPECS_DIR / "bernoulli.json", "--at", "p=0.5", "--format", "json")
    assert code == 0
    report = FisherReport.model_validate_json(out)
    assert report.matrix == [[pytest.approx(4.0, rel=1e-12)]]
    assert report.inverse == [[pytest.approx(0.25, rel=1e-12)]]
    assert report.method.kind == "exact"


def test_fisher_categorical_inverse(capsys):
    code, out, _ = run(capsys, "fisher", SPECS_DIR / "categorical3.json", "--format", "json")
    assert code == 0
    inverse = FisherReport.model_validate_json(out).inverse
    assert inverse[0] == [pytest.approx(2 / 9, abs=1e-9), pytest.approx(-1 / 9, abs=1e-9)]
    assert inverse[1] == [pytest.approx(-1 / 9, abs=1e-9), pytest.approx(2 / 9, abs=1e-9)]


def test_fisher_point_outside_domain(capsys):
    code, out, err = run(capsys, "fisher", SPECS_DIR / "bernoulli.json", "--at", "p=1.5")
    assert code == 2
    assert out == ""
    assert err.startswith("error: parameter outside domain")


def test_fisher_table_output(capsys):
    code, out, _ = run(capsys, "fisher", SPECS_DIR / "bernoulli.json")
    assert code == 0
    assert "information" in out
    assert "inverse" in out
    assert out.splitlines()[1].startswith("at           p=0.2999")


def test_fisher_singular_table_exits_three(capsys, write_spec, tmp_path):
    table = {"support": [0.0, 1.0], "parameters": {"p": [0.0, 1.0]}, "densities": [[0.5, 0.5], [0.5, 0.5]]}
    (tmp_path / "flat.json").write_text(json.dumps(table), encoding="utf-8")
    path = write_spec({"family": {"kind": "tabulated", "table": "flat.json"}, "at": {"p": 0.5}})
    code, _, err = run(capsys, "fisher", path)
    assert code == 3
    assert "at p=(0.5)" in err


def test_crb_squared_mean(capsys):
    code, out, _ = run(capsys, "crb", SPECS_DIR / "gaussian_square.json", "--format", "json")
    assert code == 0
    report = CrbReport.model_validate_json(out)
    assert report.theta == "mu^2"
    assert report.theta_value == pytest.approx(2.25)
    assert report.bound == pytest.approx(9.0, rel=1e-6)


def test_crb_theta_flag_overrides_spec(capsys):
    code, out, _ = run(
        capsys, "crb", SPECS_DIR / "gaussian_square.json", "--theta", "mu", "--at", "mu=0", "--format", "json"
    )
    assert code == 0
    assert CrbReport.model_validate_json(out).bound == pytest.approx(1.0, rel=1e-6)


def test_crb_constant_parameter_function(capsys):
    code, out, _ = run(capsys, "crb", SPECS_DIR / "gaussian.json", "--theta", "3.14", "--format", "json")
    assert code == 0
    assert CrbReport.model_validate_json(out).bound == pytest.approx(0.0, abs=1e-15)


def test_crb_unknown_theta_variable(capsys):
    code, _, err = run(capsys, "crb", SPECS_DIR / "gaussian.json", "--theta", "mu + sigma")
    assert code == 2
    assert "unknown variable 'sigma' at offset 5" in err


def test_crb_theta_near_the_boundary(capsys, caplog):
    code, out, _ = run(
        capsys, "crb", SPECS_DIR / "bernoulli.json", "--theta", "log(p)", "--at", "p=5e-6", "--format", "json"
    )
    assert code == 0
    report = CrbReport.model_validate_json(out)
    assert report.bound == pytest.approx((1 - 5e-6) / 5e-6, rel=0.25)
    assert "shrunk 2 time(s)" in caplog.text


def test_crb_overlong_theta_is_an_input_error(capsys):
    code, out, err = run(capsys, "crb", SPECS_DIR / "gaussian.json", "--theta", "+".join(["mu"] * 1200))
    assert code == 2
    assert out == ""
    assert "nested deeper than 64 at offset" in err


def test_verify_two_channel_average(capsys):
    code, out, _ = run(capsys, "verify", SPECS_DIR / "two_channel.json", "--format", "json")
    assert code == 0
    report = BoundReport.model_validate_json(out)
    assert report.variance == pytest.approx(1.25, abs=1e-6)
    assert report.bound == pytest.approx(0.8, abs=1e-6)
    assert report.slack == pytest.approx(0.45, abs=1e-6)
    assert report.passed and not report.biased


def test_verify_two_channel_weighted_average_is_efficient(capsys, write_spec):
    document = spec_document("two_channel.json")
    document["estimator"] = "0.8*x1 + 0.2*x2"
    code, out, _ = run(capsys, "verify", write_spec(document), "--format", "json")
    assert code == 0
    report = BoundReport.model_validate_json(out)
    assert report.efficiency == pytest.approx(1.0, abs=1e-6)
    assert report.slack == pytest.approx(0.0, abs=1e-6)


def test_verify_biased_estimator_fails(capsys, write_spec):
    document = spec_document("bernoulli.json")
    document["estimator"] = "x + 0.1"
    code, out, err = run(capsys, "verify", write_spec(document), "--format", "json")
    assert code == 4
    report = BoundReport.model_validate_json(out)
    assert report.biased
    assert not report.bound_applicable
    assert report.bias == pytest.approx(0.1, abs=1e-12)
    assert "estimator is biased" in err


def test_verify_missing_estimator(capsys):
    code, _, err = run(capsys, "verify", SPECS_DIR / "categorical3.json")
    assert code == 2
    assert "needs an estimator" in err


def test_verify_monte_carlo_confirmation(capsys):
    code, out, _ = run(capsys, "verify", SPECS_DIR / "gaussian.json", "--mc-seeds", "3", "--format", "json")
    assert code == 0
    summary = BoundReport.model_validate_json(out).mc_verify
    assert [o.seed for o in summary.outcomes] == [0, 1, 2]
    assert summary.mc_samples == 100_000
    assert summary.pass_rate == 1.0


def test_verify_table_output(capsys):
    code, out, _ = run(capsys, "verify", SPECS_DIR / "poisson.json")
    assert code == 0
    assert out.rstrip().endswith("PASS")


def test_check_gaussian_passes(capsys):
    code, out, _ = run(capsys, "check", SPECS_DIR / "gaussian.json", "--format", "json")
    assert code == 0
    ledger = CheckLedger.model_validate_json(out)
    assert ledger.passed
    names = [c.name for c in ledger.checks]
    assert "gradient identity" in names
    assert "proof chain" in names
    assert "reference measure invariance" in names


def test_check_bernoulli_logit_chart(capsys):
    code, out, _ = run(capsys, "check", SPECS_DIR / "bernoulli.json", "--format", "json")
    assert code == 0
    ledger = CheckLedger.model_validate_json(out)
    logit = [c for c in ledger.checks if c.name.startswith("crb invariance logit")]
    assert len(logit) == 1
    assert logit[0].passed


def test_check_tabulated_passes(capsys):
    code, out, _ = run(capsys, "check", SPECS_DIR / "tabulated_bernoulli.json")
    assert code == 0
    assert "FAIL" not in out


def test_check_corrupted_table(capsys, write_spec, tmp_path):
    table = {"support": [0.0, 1.0], "parameters": {"p": [0.2, 0.8]}, "densities": [[0.8, 0.2], [0.3, 0.8]]}
    (tmp_path / "broken.json").write_text(json.dumps(table), encoding="utf-8")
    path = write_spec({"family": {"kind": "tabulated", "table": "broken.json"}})
    code, out, err = run(capsys, "check", path)
    assert code == 2
    assert out == ""
    assert "sums to 1.1" in err


def test_check_missing_table(capsys, write_spec):
    path = write_spec({"family": {"kind": "tabulated", "table": "nowhere.json"}})
    code, _, err = run(capsys, "check", path)
    assert code == 2
    assert "cannot read density table" in err


def test_sweep_bernoulli_bound_curve(capsys):
    code, out, _ = run(capsys, "sweep", SPECS_DIR / "bernoulli.json", "--range", "p=0.1:0.9:9")
    assert code == 0
    assert "\r" not in out
    rows = list(csv.DictReader(io.StringIO(out)))
    assert out.splitlines()[0] == "point,theta,variance,bound,slack,efficiency,error"
    assert len(rows) == 9
    for row in rows:
        p = float(row["point"])
        assert float(row["bound"]) == pytest.approx(p * (1 - p), abs=1e-8)
        assert float(row["variance"]) == pytest.approx(p * (1 - p), abs=1e-12)
        assert row["error"] == ""


def test_sweep_single_step(capsys):
    code, out, _ = run(capsys, "sweep", SPECS_DIR / "bernoulli.json", "--range", "p=0.25:0.75:1", "--format", "json")
    assert code == 0
    rows = json.loads(out)
    assert len(rows) == 1
    assert rows[0]["point"] == 0.25


def test_sweep_without_estimator_leaves_variance_empty(capsys):
    code, out, _ = run(capsys, "sweep", SPECS_DIR / "categorical3.json", "--range", "p1=0.2:0.4:3")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 3
    assert all(row["variance"] == "" and row["bound"] != "" for row in rows)


@pytest.mark.parametrize("bad_range", ["p=0.5:1.5:3", "p=0.1:0.9", "p=0.9:0.1:3", "p=0.1:0.9:0", "q=0.1:0.9:3"])
def test_sweep_bad_ranges(capsys, bad_range):
    code, out, _ = run(capsys, "sweep", SPECS_DIR / "bernoulli.json", "--range", bad_range)
    assert code == 2
    assert out == ""


def test_sweep_out_file(capsys, tmp_path):
    target = tmp_path / "sweep.csv"
    code, out, _ = run(capsys, "sweep", SPECS_DIR / "bernoulli.json", "--range", "p=0.2:0.8:4", "--out", target)
    assert code == 0
    assert out == ""
    data = target.read_bytes()
    assert b"\r\n" not in data
    assert data.count(b"\n") == 5


def test_json_is_reproducible(capsys):
    argv = ["verify", SPECS_DIR / "gaussian_square.json", "--format", "json"]
    _, first, _ = run(capsys, *argv)
    _, second, _ = run(capsys, *argv)
    assert first == second


def test_monte_carlo_ignores_worker_count(capsys, write_spec):
    document = spec_document("gaussian.json")
    document["method"] = {"kind": "mc", "samples": 40_000, "seed": 11}
    path = write_spec(document)
    _, single, _ = run(capsys, "fisher", path, "--format", "json", "--workers", "1")
    _, several, _ = run(capsys, "fisher", path, "--format", "json", "--workers", "4")
    assert single == several
    assert FisherReport.model_validate_json(single).method.seed == 11


def test_seed_flag(capsys, write_spec):
    document = spec_document("gaussian.json")
    document["method"] = {"kind": "mc", "samples": 40_000, "seed": 11}
    path = write_spec(document)
    _, out, _ = run(capsys, "fisher", path, "--format", "json", "--seed", "12")
    assert FisherReport.model_validate_json(out).method.seed == 12


def test_unknown_spec_key(capsys, write_spec):
    document = spec_document("gaussian.json")
    document["tolerance"] = 1e-3
    code, _, err = run(capsys, "fisher", write_spec(document))
    assert code == 2
    assert "tolerance" in err


def test_wrong_schema_version(capsys, write_spec):
    document = spec_document("gaussian.json")
    document["schema_version"] = 2
    code, _, _ = run(capsys, "fisher", write_spec(document))
    assert code == 2


def test_zero_workers(capsys):
    code, _, err = run(capsys, "fisher", SPECS_DIR / "gaussian.json", "--workers", "0")
    assert code == 2
    assert "--workers" in err


def test_argparse_errors_exit_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fisher"])
    assert exc.value.code == 2
    capsys.readouterr()
@pytest.mark.parametrize("name", sorted(SCHEMAS))
def test_schema_command(capsys, name):
    code, out, _ = run(capsys, "schema", name)
    assert code == 0
    schema = json.loads(out)
    assert set(schema["properties"]) == set(SCHEMAS[name].model_fields)


@pytest.mark.parametrize(
    "filename,model",
    [
        ("model_spec.schema.json", ModelSpec),
        ("fisher_report.schema.json", FisherReport),
        ("crb_report.schema.json", CrbReport),
        ("bound_report.schema.json", BoundReport),
        ("check_ledger.schema.json", CheckLedger),
        ("sweep_row.schema.json", SweepRow),
    ],
)
def test_published_schemas_match_models(filename, model):
    schema = json.loads((SCHEMAS_DIR / filename).read_text(encoding="utf-8"))
    assert schema["title"] == model.__name__
    assert set(schema["properties"]) == set(model.model_fields)
    assert set(schema["required"]) == {name for name, field in model.model_fields.items() if field.is_required()}
    assert schema["additionalProperties"] is False


def test_every_schema_name_is_published():
    published = {path.name for path in SCHEMAS_DIR.glob("*.schema.json")}
    assert published == {f"{name.replace('-', '_')}.schema.json" for name in SCHEMAS}


@pytest.mark.parametrize("path", sorted(p for p in SPECS_DIR.glob("*.json") if p.name != "bernoulli_table.json"))
def test_sample_specs_are_valid(path):
    ModelSpec.model_validate_json(path.read_text(encoding="utf-8"))
