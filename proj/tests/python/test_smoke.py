import json
import math

import numpy as np
import pytest

import graphfree as gf


@pytest.fixture(scope="module")
def frames():
    return gf.generate_lj_dataset(60, 2, 5, seed=3)


def test_lennard_jones_dimer_at_minimum():
    r_min = 2 ** (1 / 6) * 3.4
    energy, forces = gf.lennard_jones(np.array([[0.0, 0, 0], [r_min, 0, 0]]))
    assert energy == pytest.approx(-0.0104)
    assert np.abs(forces).max() < 1e-12


def test_frame_round_trip_through_xyz(frames, tmp_path):
    path = str(tmp_path / "f.xyz")
    gf.write_xyz(path, frames[:5])
    back = gf.read_xyz(path)
    assert back == frames[:5]
    assert gf.parse_xyz(gf.to_xyz(frames[:2])) == frames[:2]
    f = back[0]
    assert f.positions.shape == (len(f), 3)
    assert f.forces.shape == (len(f), 3)
    energy, forces = gf.lennard_jones(f.positions)
    assert f.energy == pytest.approx(energy)
    np.testing.assert_allclose(f.forces, forces, atol=1e-10)


def test_frame_validation():
    with pytest.raises(ValueError):
        gf.Frame([18, 18], np.zeros((3, 3)))


def test_codebook_encodes_finetune_sequences(frames, tmp_path):
    cb = gf.Codebook.fit(frames, position_1d_bins=16, force_bins=32, energy_bins=8)
    enc = cb.encode(frames[0], "finetune")
    n = len(frames[0])
    assert enc["token_ids"].shape == (2 * n + 7,)
    assert enc["continuous"].shape[0] == 2 * n + 7
    assert enc["text"].startswith("<BOS>")
    assert cb.encode(frames[0], "pretrain")["token_ids"].shape == (5 * n + 11,)
    cb.save(str(tmp_path / "cb.json"))
    assert gf.Codebook.load(str(tmp_path / "cb.json")).hash == cb.hash
    with pytest.raises(ValueError):
        cb.encode(frames[0], "sideways")


def test_effective_radius_worked_example():
    assert gf.effective_radius([0.2] * 5, [0, 1, 2, 3, 4], 0.9) == 4.0


def test_scaling_fits():
    n = [1e5, 1e6, 1e7, 1e8]
    fit = gf.fit_power_law(n, [(x / 1e6) ** -0.1 for x in n])
    assert fit["alpha"] == pytest.approx(-0.1)
    assert fit["n_c"] == pytest.approx(1e6)
    ns, ds, ls = [], [], []
    for a in [1e6, 3e6, 1e7, 3e7]:
        for d in [1e8, 1e9, 1e10]:
            ns.append(a)
            ds.append(d)
            ls.append(1.7 + 400 * a**-0.34 + 410 * d**-0.28)
    joint = gf.fit_joint_scaling(ns, ds, ls)
    assert joint["alpha"] == pytest.approx(0.34, rel=1e-3)
    iso = gf.isoflop(joint["l_inf"], joint["a"], joint["alpha"], joint["b"], joint["beta"], 1e18)
    opt = iso["optimum"]
    assert 6 * opt["n"] * opt["d"] == pytest.approx(1e18)


def test_lj_dynamics_conserve_energy(frames):
    bound = min(frames, key=lambda f: f.energy)
    traj = gf.run_md(bound, ensemble="nve", dt_fs=1.0, steps=500, stride=50, temperature_k=20)
    assert not traj["unstable"]
    assert len(traj["time_fs"]) == 11
    assert traj["energy_drift"] < 1e-4
    width, h = gf.h_of_r(traj["positions"], r_max=10.0, n_bins=50)
    assert math.isclose(float(np.sum(h) * width), 1.0, rel_tol=1e-9) or np.sum(h) == 0


def test_cli_pipeline_and_model(tmp_path):
    run = lambda *a: gf.cli([str(x) for x in a])
    d, cbdir, ft = tmp_path / "d", tmp_path / "cb", tmp_path / "ft"
    assert run("gen-data", "--n_frames=40", "--atoms_max=4", f"--out={d}")[0] == 0
    code, _, err = run("fit-codebook", f"--data={d}/train.xyz", "--position_1d_bins=16",
                       "--force_bins=32", "--energy_bins=8", f"--out={cbdir}")
    assert code == 0, err
    code, _, err = run("finetune", f"--data={d}/train.xyz", f"--codebook={cbdir}/codebook.json",
                       "--hidden_dim=16", "--n_layers=1", "--intermediate_size=32", "--n_heads=2",
                       "--max_steps=3", f"--out={ft}")
    assert code == 0, err
    manifest = json.loads((ft / "manifest.json").read_text())
    assert manifest["status"] == "ok"

    model = gf.Model(str(ft / "checkpoint.gfckpt"))
    cb = gf.Codebook.load(str(cbdir / "codebook.json"))
    assert model.step == 3
    assert model.config["hidden_dim"] == 16
    test = gf.read_xyz(str(d / "test.xyz"))
    energy, forces = model.predict(cb, test[0])
    assert math.isfinite(energy)
    assert forces.shape == (len(test[0]), 3)
    metrics = model.evaluate(cb, test)
    assert metrics["frames"] == len(test)

    assert run("no-such-command")[0] == 1
    assert run("fit-codebook", f"--data={tmp_path}/missing.xyz")[0] == 2
