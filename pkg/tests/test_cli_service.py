"""CLI subcommands and the HTTP service, including byte-exactness between
the two front ends."""

import base64
import json

import numpy as np
import pytest

from stwo import pngio
from stwo.cli import main
from stwo.nets import NetConfig
from stwo.service import ModelHandle, create_app, latent_from_seed
from stwo import training as tr


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = tr.TrainConfig(config_id="stgan_wo", steps=2, seed=1, batch=2,
                         synthetic_count=4, net=NetConfig(n=4, r=3))
    path = str(root / "model.stwo")
    tr.run_training(cfg, checkpoint_path=path)
    return path


@pytest.fixture(scope="module")
def msg_ckpt(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_msg")
    cfg = tr.TrainConfig(config_id="baseline", steps=1, seed=1, batch=2,
                         synthetic_count=4,
                         net=NetConfig(n=4, r=3, arch="msg_baseline"))
    path = str(root / "msg.stwo")
    tr.run_training(cfg, checkpoint_path=path)
    return path


@pytest.fixture(scope="module")
def client(ckpt):
    from fastapi.testclient import TestClient

    return TestClient(create_app(ModelHandle.from_checkpoint(ckpt)))


# ---------------------------------------------------------------------------
# CLI

class TestCli:
    def test_train_and_artifacts(self, tmp_path):
        cfg = tr.TrainConfig(config_id="D", steps=1, seed=3, batch=2,
                             synthetic_count=4, net=NetConfig(n=4, r=3))
        cfg_path = tmp_path / "cfg.json"
        tr.save_config(cfg, str(cfg_path))
        out = tmp_path / "m.stwo"
        log = tmp_path / "log.csv"
        rc = main(["train", "--config", str(cfg_path), "--ckpt", str(out),
                   "--log", str(log), "--quiet"])
        assert rc == 0
        assert out.exists() and log.exists()
        assert tr.load_checkpoint(str(out)).step == 1

    def test_sample_deterministic(self, ckpt, tmp_path):
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        assert main(["sample", "--ckpt", ckpt, "--seed1", "7", "--seed2", "9",
                     "--out", str(a)]) == 0
        assert main(["sample", "--ckpt", ckpt, "--seed1", "7", "--seed2", "9",
                     "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        img = pngio.load(str(a))
        assert img.shape == (3, 16, 16)

    def test_edit_alpha_zero_matches_sample(self, ckpt, tmp_path):
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        main(["sample", "--ckpt", ckpt, "--seed1", "4", "--seed2", "5",
              "--out", str(a)])
        assert main(["edit", "--ckpt", ckpt, "--seed1", "4", "--seed2", "5",
                     "--dir-seed", "2", "--alpha", "0", "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_edit_alpha_moves_image(self, ckpt, tmp_path):
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        main(["edit", "--ckpt", ckpt, "--seed1", "4", "--seed2", "5",
              "--dir-seed", "2", "--alpha", "0", "--out", str(a)])
        main(["edit", "--ckpt", ckpt, "--seed1", "4", "--seed2", "5",
              "--dir-seed", "2", "--alpha", "6.0", "--out", str(b)])
        assert a.read_bytes() != b.read_bytes()

    def test_metrics_json(self, ckpt, capsys):
        assert main(["metrics", "--ckpt", ckpt, "--space", "w1_orthogonal",
                     "--paths", "2", "--seed", "5"]) == 0
        out = json.loads(capsys.readouterr().out.strip())
        assert set(out) == {"config_id", "space", "epsilon", "num_paths",
                            "value", "std_error"}
        assert out["config_id"] == "stgan_wo"
        assert out["num_paths"] == 2 and out["value"] >= 0.0

    def test_metrics_single_path_zero_stderr(self, ckpt, capsys):
        assert main(["metrics", "--ckpt", ckpt, "--paths", "1"]) == 0
        out = json.loads(capsys.readouterr().out.strip())
        assert out["std_error"] == 0.0

    def test_decompose(self, ckpt, tmp_path, capsys):
        src = tmp_path / "x.png"
        main(["sample", "--ckpt", ckpt, "--seed1", "1", "--out", str(src)])
        assert main(["decompose", "--in", str(src)]) == 0
        s = pngio.load(str(tmp_path / "x.structure.png"))
        t = pngio.load(str(tmp_path / "x.texture.png"))
        assert s.shape == t.shape == (3, 16, 16)
        # structure is the smooth part: its gradient energy cannot exceed
        # the original's
        orig = pngio.load(str(src))
        tv = lambda im: float(np.abs(np.diff(im, axis=-1)).sum()
                              + np.abs(np.diff(im, axis=-2)).sum())
        assert tv(s) <= tv(orig) + 1e-6

    def test_verify(self, capsys):
        assert main(["verify", "--trials", "5"]) == 0
        out = capsys.readouterr().out
        assert "demod-equivalence max error" in out
        assert "verify: OK" in out

    def test_usage_errors_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["sample", "--nope"])
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_runtime_error_exit_1(self, tmp_path, capsys):
        rc = main(["sample", "--ckpt", str(tmp_path / "missing.stwo"),
                   "--seed1", "0", "--out", str(tmp_path / "x.png")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# HTTP service

class TestService:
    def test_info(self, client):
        r = client.get("/api/info")
        assert r.status_code == 200
        body = r.json()
        assert body["n"] == 4 and body["r"] == 3
        assert body["resolutions"] == [8, 16]
        assert body["config_id"] == "stgan_wo"
        assert body["w_dim"] == 64

    def test_generate_deterministic(self, client):
        req = {"seed1": 11, "seed2": 3}
        a = client.post("/api/generate", json=req)
        b = client.post("/api/generate", json=req)
        assert a.status_code == 200
        assert a.json()["png_base64"] == b.json()["png_base64"]
        png = base64.b64decode(a.json()["png_base64"])
        assert pngio.load(png).shape == (3, 16, 16)
        assert len(a.json()["w1_id"]) == 16

    def test_edit_alpha_zero_equals_generate(self, client):
        gen = client.post("/api/generate", json={"seed1": 6, "seed2": 2})
        edit = client.post("/api/edit", json={"seed1": 6, "seed2": 2,
                                              "dir_seed": 4, "alpha": 0.0})
        assert edit.status_code == 200
        assert edit.json()["png_base64"] == gen.json()["png_base64"]
        assert edit.json()["delta_norm"] == 0.0

    def test_edit_delta_norm(self, client):
        for alpha in (1.5, -3.0):
            r = client.post("/api/edit", json={"seed1": 6, "seed2": 2,
                                               "dir_seed": 4, "alpha": alpha})
            assert abs(r.json()["delta_norm"] - abs(alpha)) < 1e-6

    def test_texture_ignores_structure_seed(self, client):
        # the endpoint takes no seed2 at all; same seed1 -> same bytes
        a = client.get("/api/texture", params={"seed1": 9})
        b = client.get("/api/texture", params={"seed1": 9})
        c = client.get("/api/texture", params={"seed1": 10})
        assert a.status_code == 200
        assert list(a.json()["levels"]) == ["8"]
        assert a.json() == b.json()
        assert a.json() != c.json()

    def test_directions(self, client, ckpt):
        r = client.get("/api/directions", params={"seed1": 3, "count": 4})
        assert r.status_code == 200
        seeds = r.json()["dir_seeds"]
        assert len(seeds) == 4 and len(set(seeds)) == 4
        handle = ModelHandle.from_checkpoint(ckpt)
        w1 = handle.w_from_seed(3, 1)
        for s in seeds:
            v = handle.direction(3, s)
            assert abs(v @ w1) < 1e-9 * np.linalg.norm(w1)
            assert abs(np.linalg.norm(v) - 1.0) < 1e-9

    def test_malformed_body_is_400(self, client):
        r = client.post("/api/generate", json={"seed1": "not-an-int"})
        assert r.status_code == 400
        assert "error" in r.json()
        r = client.post("/api/edit", json={"seed1": 1})
        assert r.status_code == 400
        r = client.get("/api/directions", params={"seed1": 2, "count": 0})
        assert r.status_code == 400

    def test_cli_and_service_agree_byte_exact(self, client, ckpt, tmp_path):
        out = tmp_path / "cli.png"
        main(["sample", "--ckpt", ckpt, "--seed1", "11", "--seed2", "3",
              "--out", str(out)])
        api = client.post("/api/generate", json={"seed1": 11, "seed2": 3})
        assert out.read_bytes() == base64.b64decode(api.json()["png_base64"])
        out2 = tmp_path / "cli_edit.png"
        main(["edit", "--ckpt", ckpt, "--seed1", "11", "--seed2", "3",
              "--dir-seed", "11000", "--alpha", "2.5", "--out", str(out2)])
        api2 = client.post("/api/edit", json={"seed1": 11, "seed2": 3,
                                              "dir_seed": 11000,
                                              "alpha": 2.5})
        assert out2.read_bytes() == base64.b64decode(api2.json()["png_base64"])

    def test_msg_checkpoint(self, msg_ckpt):
        from fastapi.testclient import TestClient

        c = TestClient(create_app(ModelHandle.from_checkpoint(msg_ckpt)))
        r = c.post("/api/generate", json={"seed1": 2})
        assert r.status_code == 200
        t = c.get("/api/texture", params={"seed1": 2})
        assert t.status_code == 400 and "error" in t.json()


class TestSeedLatents:
    def test_latent_from_seed_deterministic(self):
        assert np.array_equal(latent_from_seed(5, 8), latent_from_seed(5, 8))
        assert not np.array_equal(latent_from_seed(5, 8),
                                  latent_from_seed(6, 8))

    def test_ema_weights_are_served(self, tmp_path):
        cfg = tr.TrainConfig(config_id="stgan_wo", steps=1, seed=2, batch=2,
                             synthetic_count=4, net=NetConfig(n=4, r=3),
                             ema_beta=0.5)
        p = str(tmp_path / "m.stwo")
        state = tr.run_training(cfg, checkpoint_path=p)
        served = ModelHandle.from_checkpoint(p)
        raw = ModelHandle.from_checkpoint(p, use_ema=False)
        name = state.G.params[0].name
        assert np.array_equal(served.G.params[0].data, state.ema[name])
        assert not np.array_equal(served.G.params[0].data,
                                  raw.G.params[0].data)
