import json
import subprocess
import sys

import pytest

from compass import cli, hw_model, network_ir
from compass.network_ir import GraphBuilder

FAST = ["--generations", "4", "--population", "20"]


def _run(*argv):
    return cli.main([str(a) for a in argv])


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_compile_outputs_and_reproducibility(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for out, workers in ((a, 1), (b, 1), (c, 2)):
        assert _run("compile", "--model", "resnet18", "--chip", "M", "--seed", 3, "--workers", workers,
                    "--out", out, *FAST) == 0
    fa = _files(a)
    assert set(fa) == {f"resnet18-M-16-compass.{x}" for x in
                       ("json", "partitions.csv", "convergence.csv", "instructions.txt", "trace.txt")}
    assert fa == _files(b) == _files(c)
    doc = json.loads(fa["resnet18-M-16-compass.json"])
    assert doc["format_version"] == 1
    assert doc["provenance"]["seed"] == 3
    assert doc["ga"]["population"] == 20
    assert doc["report"]["num_partitions"] == len(doc["group"]["partitions"])


def test_greedy_squeezenet_l_single_partition(tmp_path):
    assert _run("compile", "--model", "squeezenet", "--chip", "L", "--scheme", "greedy", "--out", tmp_path,
                "--no-trace") == 0
    doc = json.loads((tmp_path / "squeezenet-L-16-greedy.json").read_text())
    assert doc["report"]["num_partitions"] == 1
    assert "ga" not in doc
    assert not (tmp_path / "squeezenet-L-16-greedy.trace.txt").exists()
    assert (tmp_path / "squeezenet-L-16-greedy.instructions.txt").exists()


def test_unknown_scheme_exits_1(capsys):
    assert _run("compile", "--model", "vgg16", "--chip", "S", "--scheme", "magic") == 1
    assert "--scheme" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["compile", "--model", "vgg16"], ["compile", "--model", "nope", "--chip", "S"],
                                  ["compile", "--model", "vgg16", "--chip", "XL"],
                                  ["compile", "--model", "vgg16", "--chip", "S", "--batch", "0"],
                                  ["sweep", "--model", "vgg16", "--chip", "S", "--batches", "1,x"]])
def test_bad_input_exits_1(argv, tmp_path):
    assert _run(*argv, "--out", tmp_path) == 1


def test_unmappable_pair_exits_2(tmp_path, capsys):
    chip = hw_model.builtin_chip("S")
    tiny = hw_model.replace(chip, name="tiny", num_cores=1)
    ini = tmp_path / "tiny.ini"
    ini.write_text(hw_model.dump_chip_spec(tiny))
    assert _run("compile", "--model", "vgg16", "--chip", ini, "--scheme", "greedy", "--out", tmp_path) == 2
    assert "infeasible" in capsys.readouterr().err


def test_compare_ratios_recomputable(tmp_path):
    assert _run("compare", "--model", "squeezenet", "--chip", "M", "--out", tmp_path, *FAST) == 0
    doc = json.loads((tmp_path / "squeezenet-M-16-compare.json").read_text())
    r = doc["reports"]
    for other in ("greedy", "layerwise"):
        got = doc["compass_over"][other]
        assert got["throughput"] == r["compass"]["throughput_samples_per_s"] / r[other]["throughput_samples_per_s"]
        assert got["edp"] == r[other]["edp_per_sample_pj_ns"] / r["compass"]["edp_per_sample_pj_ns"]
        assert got["pgf"] >= 1.0
    rows = (tmp_path / "squeezenet-M-16-compare.csv").read_text().splitlines()
    assert [x.split(",")[0] for x in rows[1:]] == ["compass", "greedy", "layerwise"]


def test_single_layer_schemes_agree(tmp_path):
    g = GraphBuilder("one", (3, 8, 8))
    g.conv(None, 3, 16, 3, padding=1)
    path = tmp_path / "one.json"
    path.write_text(network_ir.dump_network(g.build()))
    assert _run("compare", "--model", path, "--chip", "S", "--out", tmp_path, *FAST) == 0
    doc = json.loads((tmp_path / "one-S-16-compare.json").read_text())
    reps = doc["reports"]
    keys = ("throughput_samples_per_s", "energy_total_pj", "pgf", "num_partitions")
    assert {tuple(reps[s][k] for k in keys) for s in reps} == {tuple(reps["greedy"][k] for k in keys)}
    assert all(v == {"throughput": 1.0, "edp": 1.0, "pgf": 1.0} for v in doc["compass_over"].values())


def test_sweep_write_ratio(tmp_path):
    assert _run("sweep", "--model", "resnet18", "--chip", "S", "--scheme", "greedy", "--batches", "1,16",
                "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "resnet18-S-greedy-sweep.json").read_text())
    r1, r16 = doc["write_mvm_energy_ratio"]
    assert r1 / r16 == pytest.approx(16, rel=1e-12)
    assert doc["throughput"][1] > doc["throughput"][0]


def test_sweep_matches_compile(tmp_path):
    _run("sweep", "--model", "squeezenet", "--chip", "S", "--batches", "1", "--seed", 5, "--out", tmp_path, *FAST)
    _run("compile", "--model", "squeezenet", "--chip", "S", "--batch", 1, "--seed", 5, "--no-schedule",
         "--out", tmp_path, *FAST)
    sweep = json.loads((tmp_path / "squeezenet-S-compass-sweep.json").read_text())["reports"][0]
    comp = json.loads((tmp_path / "squeezenet-S-1-compass.json").read_text())["report"]
    assert sweep == comp


def test_models_and_chips(capsys, tmp_path):
    assert _run("models") == 0
    out = capsys.readouterr().out
    assert all(n in out for n in network_ir.BENCHMARKS)
    assert _run("chips") == 0
    out = capsys.readouterr().out
    assert all(line.split()[0] in "SML" for line in out.strip().splitlines())
    assert _run("models", "--dump", "resnet18") == 0
    dumped = tmp_path / "r.json"
    dumped.write_text(capsys.readouterr().out)
    assert network_ir.dump_network(network_ir.load_network(dumped)) == dumped.read_text()
    assert _run("chips", "--dump", "M") == 0
    ini = tmp_path / "m.ini"
    ini.write_text(capsys.readouterr().out)
    assert hw_model.load_chip_spec(ini) == hw_model.builtin_chip("M")


def test_workers_env(monkeypatch):
    monkeypatch.setenv("COMPASS_WORKERS", "3")
    assert cli._workers(None) == 3
    assert cli._workers(1) == 1
    monkeypatch.setenv("COMPASS_WORKERS", "many")
    with pytest.raises(ValueError):
        cli._workers(None)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "compass.cli", "compile", "--model", "squeezenet", "--chip", "L",
                           "--scheme", "layerwise", "--no-schedule", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "layerwise" in proc.stdout
