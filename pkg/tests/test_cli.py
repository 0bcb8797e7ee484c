import json
import os

import numpy as np
import pytest

from fluxrec import cli
from fluxrec.config import SCHEMAS, parse_config, resolve_field
from fluxrec.errors import MalformedFileError, SchemaError, UnknownKeyError
from fluxrec.geometry import GAMMA_I, load_mesh
from fluxrec.spectral import build_spectral_basis, synthesize_flux_with_smoothness


def run(argv):
    return cli.dispatch(argv)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cliwork")
    assert run(["mesh-gen", "--h", "0.1", "--out", str(d / "mesh.txt")]) == 0
    return d


def test_parse_config_defaults(tmp_path):
    empty = tmp_path / "empty.cfg"
    empty.write_text("")
    cfg = parse_config(str(empty), SCHEMAS["forward"])
    assert cfg["r_inner"] == 0.5
    assert cfg["r_outer"] == 1.0
    assert cfg["alpha"] == 1.0
    assert cfg["k"] == 1.0
    assert cfg["f"] == 0.0
    assert cfg["u_a"] == 0.0
    assert cfg["kappa"] == 0.9
    assert cfg["s"] == 0.5
    assert cfg["eps"] == 0.01
    assert cfg["tau_d"] == 1.5
    assert cfg["m0"] == 10.0


def test_parse_config_domain_guards(tmp_path):
    bad_kappa = tmp_path / "k.cfg"
    bad_kappa.write_text("kappa = 1.5\n")
    with pytest.raises(SchemaError):
        parse_config(str(bad_kappa), SCHEMAS["forward"])
    bad_s = tmp_path / "s.cfg"
    bad_s.write_text("s = 0.7\n")
    with pytest.raises(SchemaError):
        parse_config(str(bad_s), SCHEMAS["forward"])


def test_parse_config_unknown_key(tmp_path):
    cfg = tmp_path / "u.cfg"
    cfg.write_text("not_a_key = 3\n")
    with pytest.raises(UnknownKeyError):
        parse_config(str(cfg), SCHEMAS["forward"])


def test_parse_config_comments_and_types(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nkappa = 0.8  # trailing\n\ndelta_grid = 1e-2, 1e-3, 1e-4, 1e-5\n")
    values = parse_config(str(cfg), SCHEMAS["rates"])
    assert values["kappa"] == 0.8
    assert values["delta_grid"] == (1e-2, 1e-3, 1e-4, 1e-5)


def test_parse_config_malformed(tmp_path):
    cfg = tmp_path / "m.cfg"
    cfg.write_text("kappa 0.8\n")
    with pytest.raises(MalformedFileError):
        parse_config(str(cfg), SCHEMAS["forward"])


def test_resolve_field_file(tmp_path):
    path = tmp_path / "field.txt"
    np.savetxt(path, np.arange(5, dtype=float))
    out = resolve_field(str(path), 5, "alpha")
    np.testing.assert_allclose(out, np.arange(5))
    with pytest.raises(SchemaError):
        resolve_field(str(path), 7, "alpha")


def test_unknown_subcommand_exits_2(capsys):
    assert run(["frobnicate"]) == 2


def test_missing_file_exits_2(tmp_path):
    assert run(["spectrum", "--mesh", str(tmp_path / "nope.txt"),
                "--out", str(tmp_path / "out.csv")]) == 2


def test_domain_error_exits_1(tmp_path):
    assert run(["mesh-gen", "--r-inner", "1.0", "--r-outer", "0.5",
                "--h", "0.1", "--out", str(tmp_path / "m.txt")]) == 1


def test_forward_and_invert_pipeline(workdir):
    mesh = load_mesh(workdir / "mesh.txt")
    basis = build_spectral_basis(mesh)
    flux = synthesize_flux_with_smoothness(basis, 0.5, 0.01, seed=42)
    cli.write_boundary_csv(workdir / "flux.csv", mesh, flux)

    assert run(["forward", "--mesh", str(workdir / "mesh.txt"),
                "--flux", str(workdir / "flux.csv"),
                "--out-trace", str(workdir / "trace.csv")]) == 0
    back = cli.read_boundary_csv(workdir / "trace.csv", mesh, "GammaA")
    assert np.isfinite(back.values).all()

    assert run(["invert", "--mesh", str(workdir / "mesh.txt"),
                "--data-trace", str(workdir / "trace.csv"),
                "--delta", "1e-4", "--seed", "3",
                "--out", str(workdir / "inv")]) == 0
    assert (workdir / "inv" / "invert_result.csv").exists()
    rec = cli.read_boundary_csv(workdir / "inv" / "flux_rec.csv", mesh, GAMMA_I)
    # low-noise inversion tracks the true flux reasonably well
    rel = np.linalg.norm(rec.values - flux.values) / np.linalg.norm(flux.values)
    assert rel <= 0.5


def test_forward_with_field_file_config(workdir, tmp_path):
    mesh = load_mesh(workdir / "mesh.txt")
    alpha_path = tmp_path / "alpha.txt"
    np.savetxt(alpha_path, np.full(mesh.n_vertices, 2.0))
    cfg = tmp_path / "fw.cfg"
    cfg.write_text(f"alpha = {alpha_path}\nu_a = 1.5\n")
    out = tmp_path / "trace_alpha.csv"
    assert run(["forward", "--mesh", str(workdir / "mesh.txt"),
                "--config", str(cfg), "--flux", str(workdir / "flux.csv"),
                "--out-trace", str(out)]) == 0
    assert out.exists()
    # wrong length field file is a schema error -> exit 2
    short = tmp_path / "short.txt"
    np.savetxt(short, np.ones(3))
    cfg.write_text(f"alpha = {short}\n")
    assert run(["forward", "--mesh", str(workdir / "mesh.txt"),
                "--config", str(cfg), "--flux", str(workdir / "flux.csv"),
                "--out-trace", str(out)]) == 2


def test_spectrum_output(workdir):
    out = workdir / "spectrum.csv"
    assert run(["spectrum", "--mesh", str(workdir / "mesh.txt"), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "n,lambda"
    first = float(lines[1].split(",")[1])
    assert first == 1.0


def test_manifest_contents(workdir):
    manifest = json.loads((workdir / "inv" / "manifest.json").read_text())
    assert manifest["subcommand"] == "invert"
    assert manifest["seeds"] == [3]
    assert manifest["version"]
    assert any(p.endswith("mesh.txt") for p in manifest["input_digests"])
    assert any(p.endswith("invert_result.csv") for p in manifest["output_digests"])
    assert manifest["runtime_seconds"] >= 0.0


def test_reruns_are_byte_identical(workdir):
    out1, out2 = workdir / "r1", workdir / "r2"
    cfg = workdir / "rates.cfg"
    cfg.write_text("delta_grid = 1e-2, 1e-3, 1e-4, 1e-5\nseeds_per_delta = 2\n")
    assert run(["rates", "--config", str(cfg), "--out-dir", str(out1)]) == 0
    assert run(["rates", "--config", str(cfg), "--out-dir", str(out2)]) == 0
    for name in ("rates.csv", "rates_plotdata.csv", "summary.txt"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    m1 = json.loads((out1 / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert sorted(m1["output_digests"].values()) == sorted(m2["output_digests"].values())


def test_outputs_stay_inside_out_dir(workdir, tmp_path):
    before = set(os.listdir(tmp_path))
    out = tmp_path / "only_here"
    cfg = tmp_path / "r.cfg"
    cfg.write_text("delta_grid = 1e-2, 1e-3, 1e-4, 1e-5\nseeds_per_delta = 1\n")
    assert run(["rates", "--config", str(cfg), "--out-dir", str(out)]) == 0
    after = set(os.listdir(tmp_path))
    assert after - before == {"only_here", "r.cfg"}
    assert set(os.listdir(out)) == {"rates.csv", "rates_plotdata.csv",
                                    "summary.txt", "manifest.json"}


def test_invert_with_fixed_rho(workdir, tmp_path):
    out = tmp_path / "inv_fixed"
    assert run(["invert", "--mesh", str(workdir / "mesh.txt"),
                "--data-trace", str(workdir / "trace.csv"),
                "--delta", "0", "--rho", "1e-6",
                "--out", str(out)]) == 0
    line = (out / "invert_result.csv").read_text().splitlines()[1]
    assert float(line.split(",")[0]) == 1e-6


def test_rates_default_config(tmp_path):
    out = tmp_path / "rates_default"
    assert run(["rates", "--out-dir", str(out)]) == 0
    for name in ("rates.csv", "rates_plotdata.csv", "summary.txt"):
        assert (out / name).exists()
    summary = (out / "summary.txt").read_text()
    assert "p_hat" in summary and "rho_rule = discrepancy" in summary


def test_vsc_and_stability_subcommands(workdir):
    assert run(["vsc-check", "--mesh", str(workdir / "mesh.txt"),
                "--n-samples", "40", "--seed", "1",
                "--out", str(workdir / "vsc")]) == 0
    report = (workdir / "vsc" / "vsc_report.csv").read_text().splitlines()
    assert report[0] == "sample_id,lhs,rhs,margin,admissible"
    assert len(report) == 41

    assert run(["stability-probe", "--mesh", str(workdir / "mesh.txt"),
                "--n-samples", "60", "--seed", "1",
                "--out", str(workdir / "stab")]) == 0
    lines = (workdir / "stab" / "stability_report.csv").read_text().splitlines()
    assert lines[0] == "sample_id,trace_norm,h1_norm,m_proxy,bound,slack"
    summary = (workdir / "stab" / "summary.txt").read_text()
    assert "C_fit" in summary and "max_violation" in summary
