import csv
import json
import math
import subprocess
import sys

import pytest
import yaml

from chernmeter.cli import PRESETS, ConfigError, main, parse_config, validate


def write(tmp_path, text, name="run.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return path


SMALL = """\
protocol: triple
delta2_mhz: [0.3, 60]
dx: [1.0]
x_values: [0, 0.35]
samples: 101
outputs: [chern_ideal, mean_p, mean_p_corrected, std_p, bloch_series]
"""


def test_minimal_config_resolves_to_figure_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, "protocol: single\nfigure: f1c\n"))
    spec = cfg.sweep_spec()
    assert spec.base.tq == 1.0
    assert spec.base.delta1 == pytest.approx(2 * math.pi * 30)
    assert spec.base.omega1 == pytest.approx(2 * math.pi * 10)
    assert spec.dx_values == (0.01, 0.1, 0.5, 1.0, 2.0, 3.0)
    assert len(spec.delta2_values) == 46
    assert "mean_p_corrected" in spec.outputs


def test_frequencies_converted_from_mhz(tmp_path):
    cfg = parse_config(write(tmp_path, "delta2_mhz: -10\nomega1_mhz: 5\n"))
    spec = cfg.sweep_spec()
    assert spec.delta2_values == (pytest.approx(-2 * math.pi * 10),)
    assert spec.base.omega1 == pytest.approx(2 * math.pi * 5)


def test_negative_duration_rejected_with_line(tmp_path):
    with pytest.raises(ConfigError) as err:
        parse_config(write(tmp_path, "protocol: single\n\ntq_us: -1\n"))
    assert err.value.key == "tq_us" and err.value.line == 3


def test_unknown_key_lists_valid_keys(tmp_path):
    with pytest.raises(ConfigError) as err:
        parse_config(write(tmp_path, "protocol: single\ndetuning3: 4\n"))
    msg = str(err.value)
    assert "detuning3" in msg and "delta2_mhz" in msg and "tq_us" in msg
    assert err.value.line == 2


def test_malformed_yaml_reports_line(tmp_path):
    with pytest.raises(ConfigError) as err:
        parse_config(write(tmp_path, "protocol: single\ndx: [1, 2\n"))
    assert err.value.line is not None


@pytest.mark.parametrize("raw,key", [
    ({"omega1_mhz": "ten"}, "omega1_mhz"),
    ({"dx": [1.0, -0.5]}, "dx"),
    ({"grid_n": 1000}, "grid_n"),
    ({"outputs": ["noise"]}, "outputs"),
    ({"format": "xml"}, "format"),
    ({"figure": "f9z"}, "figure"),
    ({"protocol": "double"}, "protocol"),
])
def test_bad_values_name_offending_key(raw, key):
    with pytest.raises(ConfigError) as err:
        validate(raw)
    assert err.value.key == key


@pytest.mark.parametrize("fig", sorted(PRESETS))
def test_every_preset_validates(fig):
    validate({"figure": fig}).sweep_spec()


def test_dry_run_writes_only_resolved_config(tmp_path):
    out = tmp_path / "o"
    rc = main(["run", str(write(tmp_path, "figure: f1c\n")), "--out", str(out), "--dry-run"])
    assert rc == 0
    assert sorted(p.name for p in out.iterdir()) == ["resolved_config.yaml"]
    resolved = yaml.safe_load((out / "resolved_config.yaml").read_text())
    assert len(resolved["delta2_mhz"]) == 46 and resolved["tq_us"] == 1.0


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = tmp / "run.yaml"
    cfg.write_text(SMALL)
    out = tmp / "a"
    assert main(["run", str(cfg), "--out", str(out)]) == 0
    return tmp, out


def read_csv(path):
    with path.open() as fh:
        return list(csv.reader(fh))


def test_run_writes_documented_datasets(small_run):
    _, out = small_run
    names = sorted(p.name for p in out.iterdir())
    assert names == sorted(["resolved_config.yaml", "diagnostics.json", "chern_raw.csv",
                            "chern_corrected.csv", "std_p.csv", "meter_snapshots.csv",
                            "chern_ideal.csv", "bloch_series.csv"])
    rows = read_csv(out / "chern_raw.csv")
    assert rows[0] == ["delta2_MHz", "dx", "mean_p", "beta", "corrected"]
    assert [r[0] for r in rows[1:]] == ["0.3", "60"]
    assert read_csv(out / "chern_ideal.csv")[0] == [
        "delta2_MHz", "chern_ideal", "partial_1", "partial_2", "partial_3"]
    assert read_csv(out / "std_p.csv")[0][:3] == ["delta2_MHz", "dx", "std_p"]
    bloch = read_csv(out / "bloch_series.csv")
    assert bloch[0] == ["delta2_MHz", "x", "t_us", "theta", "segment", "sx", "sy", "sz", "branch"]
    assert len(bloch) == 1 + 2 * 2 * 401


def test_numbers_use_twelve_significant_digits(small_run):
    _, out = small_run
    for row in read_csv(out / "chern_raw.csv")[1:]:
        for cell in row:
            digits = cell.lstrip("-").split("e")[0].replace(".", "").lstrip("0")
            assert len(digits) <= 12


def test_diagnostics_cover_every_point(small_run):
    _, out = small_run
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["n_points"] == 4 and diag["n_failed"] == 0
    assert len(diag["spec_hash"]) == 64
    assert diag["max_norm_drift"] < 1e-8
    assert diag["wall_time_s"] > 0
    assert all("max_norm_drift" in p for p in diag["points"])


def test_resolved_config_reproduces_outputs(small_run):
    tmp, out = small_run
    again = tmp / "b"
    assert main(["run", str(out / "resolved_config.yaml"), "--out", str(again)]) == 0
    for p in out.glob("*.csv"):
        assert (again / p.name).read_bytes() == p.read_bytes()


def test_json_format(tmp_path):
    cfg = write(tmp_path, "delta2_mhz: [0.3]\ndx: [1.0]\nsamples: 101\noutputs: [std_p]\n")
    out = tmp_path / "j"
    assert main(["run", str(cfg), "--out", str(out), "--format", "json"]) == 0
    recs = json.loads((out / "std_p.json").read_text())
    assert recs[0]["delta2_MHz"] == 0.3 and recs[0]["dx"] == 1.0
    assert recs[0]["std_p"] > 0.5


def test_config_error_exit_status(tmp_path, capsys):
    rc = main(["run", str(write(tmp_path, "tq_us: -2\n")), "--out", str(tmp_path / "x")])
    assert rc == 2
    report = json.loads(capsys.readouterr().err)
    assert report["error"] == "ConfigError" and report["key"] == "tq_us"


def test_all_points_failing_gives_nonzero_exit(tmp_path):
    cfg = write(tmp_path, "delta2_mhz: [0.3]\ndx: [1.0]\nhalf_width: 2.0\nsamples: 101\n")
    out = tmp_path / "f"
    assert main(["run", str(cfg), "--out", str(out)]) == 1
    diag = json.loads((out / "diagnostics.json").read_text())
    assert "GridTooNarrowError" in diag["points"][0]["error"]


def test_preset_dry_run(tmp_path):
    out = tmp_path / "p"
    assert main(["preset", "f3d", "--out", str(out), "--dry-run"]) == 0
    resolved = yaml.safe_load((out / "resolved_config.yaml").read_text())
    assert resolved["protocol"] == "triple" and resolved["outputs"] == ["std_p"]


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "chernmeter", "--help"], capture_output=True,
                         text=True, check=True).stdout
    assert "selftest" in out and "preset" in out
