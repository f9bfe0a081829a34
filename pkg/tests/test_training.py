"""Training loop, losses, R1, EMA, data pipeline, checkpoint format."""

import dataclasses
import json
import math
import os

import numpy as np
import pytest

import stwo.autodiff as ad
from gradcheck import numeric_grad
from stwo import checkpoint as ckpt
from stwo import training as tr
from stwo.data import (PyramidDataset, load_png_dir, load_png_image,
                       synthetic_corpus)
from stwo.errors import ConfigError, ContractError, FormatError, NumericError
from stwo.nets import NetConfig
from stwo.texdecomp import ImagePyramid, build_real_pyramid


def tiny_net(**kw):
    kw.setdefault("n", 4)
    kw.setdefault("r", 3)
    return NetConfig(**kw)


def tiny_cfg(**kw):
    kw.setdefault("config_id", "stgan_wo")
    kw.setdefault("steps", 2)
    kw.setdefault("seed", 11)
    kw.setdefault("batch", 2)
    kw.setdefault("synthetic_count", 4)
    if "net" not in kw:
        kw["net"] = tiny_net(arch=tr.CONFIG_TRAITS[kw["config_id"]][2])
    return tr.TrainConfig(**kw)


def all_params(state):
    return list(state.G.params) + list(state.D.params)


# ---------------------------------------------------------------------------
# synthetic corpus and PNG loading

class TestData:
    def test_corpus_shape_and_range(self):
        imgs = synthetic_corpus(5, 5, seed=3)
        assert imgs.shape == (5, 3, 32, 32)
        assert imgs.dtype == np.float32
        assert imgs.min() >= -1.0 and imgs.max() <= 1.0

    def test_corpus_deterministic(self):
        a = synthetic_corpus(3, 4, seed=9)
        b = synthetic_corpus(3, 4, seed=9)
        c = synthetic_corpus(3, 4, seed=10)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_corpus_has_fine_detail(self):
        # the sinusoid overlay must survive: image minus its local mean
        # keeps visible energy
        imgs = synthetic_corpus(4, 5, seed=0)
        for img in imgs:
            blur = (img[:, :-2, 1:-1] + img[:, 2:, 1:-1] + img[:, 1:-1, :-2]
                    + img[:, 1:-1, 2:] + img[:, 1:-1, 1:-1]) / 5.0
            hf = img[:, 1:-1, 1:-1] - blur
            assert float(np.abs(hf).mean()) > 0.01

    def test_corpus_bad_args(self):
        with pytest.raises(ConfigError):
            synthetic_corpus(0, 5, seed=0)
        with pytest.raises(ConfigError):
            synthetic_corpus(2, 2, seed=0)

    def test_png_roundtrip(self, tmp_path):
        from PIL import Image

        rng = np.random.default_rng(4)
        raw = rng.integers(0, 256, size=(80, 100, 3), dtype=np.uint8)
        p = tmp_path / "a.png"
        Image.fromarray(raw).save(p)
        x = load_png_image(str(p), 5)
        assert x.shape == (3, 32, 32)
        assert x.dtype == np.float32
        assert x.min() >= -1.0 and x.max() <= 1.0
        assert np.array_equal(x, load_png_image(str(p), 5))

    def test_png_exact_power_of_two(self, tmp_path):
        from PIL import Image

        raw = np.zeros((64, 64, 3), dtype=np.uint8)
        raw[:32] = 255
        p = tmp_path / "b.png"
        Image.fromarray(raw).save(p)
        x = load_png_image(str(p), 5)
        # pure average pooling of a half-white image keeps the halves exact
        assert np.allclose(x[:, :16], 1.0)
        assert np.allclose(x[:, 16:], -1.0)

    def test_png_too_small(self, tmp_path):
        from PIL import Image

        p = tmp_path / "c.png"
        Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(p)
        with pytest.raises(ContractError):
            load_png_image(str(p), 5)

    def test_png_dir(self, tmp_path):
        from PIL import Image

        for name in ("z.png", "a.png"):
            arr = np.full((32, 32, 3), 128, dtype=np.uint8)
            Image.fromarray(arr).save(tmp_path / name)
        batch = load_png_dir(str(tmp_path), 5)
        assert batch.shape == (2, 3, 32, 32)

    def test_png_dir_empty(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(ConfigError):
            load_png_dir(str(empty), 5)

    def test_pyramid_dataset_slices_match(self):
        imgs = synthetic_corpus(5, 4, seed=1)
        ds = PyramidDataset(imgs, 4, 3, "stia")
        assert ds.count == 5
        single = build_real_pyramid(imgs[2:3], 4, 3)
        got = ds.batch(np.array([2]))
        for res in single.rgb:
            assert np.array_equal(got.rgb[res].data, single.rgb[res].data)
        for res in single.texture:
            assert np.array_equal(got.texture[res].data,
                                  single.texture[res].data)

    def test_pyramid_dataset_msg(self):
        imgs = synthetic_corpus(3, 4, seed=1)
        ds = PyramidDataset(imgs, 4, 3, "msg_baseline")
        pyr = ds.batch(np.array([0, 2]))
        assert sorted(pyr.rgb) == [3, 4]
        assert pyr.texture == {}

    def test_pyramid_dataset_bad_batch(self):
        imgs = synthetic_corpus(3, 4, seed=1)
        ds = PyramidDataset(imgs, 4, 3, "stia")
        with pytest.raises(ContractError):
            ds.batch(np.array([3]))
        with pytest.raises(ContractError):
            ds.batch(np.array([], dtype=int))


# ---------------------------------------------------------------------------
# config

class TestTrainConfig:
    def test_traits(self):
        expect = {
            "baseline": ("demod", "off", "msg_baseline"),
            "A": ("decomp", "off", "msg_baseline"),
            "B": ("decomp", "coarse", "msg_baseline"),
            "C": ("demod", "off", "stia"),
            "D": ("decomp", "off", "stia"),
            "stgan_wo": ("decomp", "coarse", "stia"),
        }
        for cid, (scheme, ortho, arch) in expect.items():
            cfg = tr.TrainConfig(config_id=cid, net=tiny_net(arch=arch))
            assert (cfg.scheme, cfg.ortho, cfg.arch) == (scheme, ortho, arch)
            assert cfg.net.arch == arch

    def test_default_net_matches_arch(self):
        assert tr.TrainConfig(config_id="baseline").net.arch == "msg_baseline"
        assert tr.TrainConfig(config_id="stgan_wo").net.arch == "stia"

    def test_bad_ids_and_fields(self):
        with pytest.raises(ConfigError):
            tr.TrainConfig(config_id="E")
        with pytest.raises(ConfigError):
            tr.TrainConfig(config_id="baseline", net=tiny_net(arch="stia"))
        with pytest.raises(ConfigError):
            tr.TrainConfig(batch=0)
        with pytest.raises(ConfigError):
            tr.TrainConfig(lr_g=-1.0)
        with pytest.raises(ConfigError):
            tr.TrainConfig(ema_beta=1.0)

    def test_json_roundtrip(self):
        cfg = tiny_cfg(lr_g=1e-3, ema_beta=0.5, dataset=None)
        blob = json.dumps(cfg.to_json_dict(), sort_keys=True)
        back = tr.TrainConfig.from_json_dict(json.loads(blob))
        assert back.to_json_dict() == cfg.to_json_dict()
        assert back.net.channels == cfg.net.channels

    def test_json_file_roundtrip(self, tmp_path):
        cfg = tiny_cfg(seed=77)
        p = tmp_path / "cfg.json"
        tr.save_config(cfg, str(p))
        assert tr.load_config(str(p)).to_json_dict() == cfg.to_json_dict()

    def test_json_unknown_field(self):
        d = tiny_cfg().to_json_dict()
        d["unknown_knob"] = 3
        with pytest.raises(ConfigError):
            tr.TrainConfig.from_json_dict(d)

    def test_bad_config_file(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            tr.load_config(str(p))
        p.write_text("{nope")
        with pytest.raises(ConfigError):
            tr.load_config(str(p))


# ---------------------------------------------------------------------------
# losses

class TestLosses:
    def test_zero_scores(self):
        z = ad.tensor(np.zeros((4, 1)))
        loss_d, loss_g = tr.adversarial_losses(z, z)
        assert abs(loss_d.item() - 2 * math.log(2)) < 1e-12
        assert abs(loss_g.item() - math.log(2)) < 1e-12

    def test_confident_discriminator(self):
        real = ad.tensor(np.full((3, 1), 20.0))
        fake = ad.tensor(np.full((3, 1), -20.0))
        loss_d, loss_g = tr.adversarial_losses(real, fake)
        assert loss_d.item() < 1e-6
        assert loss_g.item() > 19.0

    def test_gradients_match_sigmoid(self):
        rng = np.random.default_rng(0)
        dr = ad.tensor(rng.standard_normal((5, 1)), requires_grad=True)
        df = ad.tensor(rng.standard_normal((5, 1)), requires_grad=True)
        loss_d, _ = tr.adversarial_losses(dr, df)
        gr, gf = ad.grad(loss_d, [dr, df])
        sig = lambda x: 1.0 / (1.0 + np.exp(-x))
        assert np.allclose(gr.data, -sig(-dr.data) / 5.0, atol=1e-12)
        assert np.allclose(gf.data, sig(df.data) / 5.0, atol=1e-12)


class _SumScore:
    """Stands in for a discriminator: score = sum of every level element."""

    def forward(self, pyr):
        total = None
        for t in list(pyr.rgb.values()) + list(pyr.texture.values()):
            s = ad.sum_all(t)
            total = s if total is None else ad.add(total, s)
        return total


class TestR1:
    def _pyramid(self, b=2):
        rng = np.random.default_rng(5)
        rgb = {4: ad.tensor(rng.standard_normal((b, 3, 16, 16)))}
        tex = {3: ad.tensor(rng.standard_normal((b, 3, 8, 8)))}
        return ImagePyramid(rgb=rgb, texture=tex, n=4, r=3)

    def test_sum_score_counts_elements(self):
        # unit gradient at every element: penalty = (gamma/2) * element count
        pyr = self._pyramid(b=2)
        count = 2 * 3 * (16 * 16 + 8 * 8)
        pen, score = tr.r1_penalty(_SumScore(), pyr, gamma=10.0)
        assert pen.item() == pytest.approx(5.0 * count, rel=0, abs=1e-9)
        total = sum(float(t.data.sum())
                    for t in list(pyr.rgb.values()) + list(pyr.texture.values()))
        assert score.item() == pytest.approx(total, abs=1e-9)

    def test_gamma_scaling_and_zero(self):
        pyr = self._pyramid()
        p1, _ = tr.r1_penalty(_SumScore(), pyr, gamma=1.0)
        p4, _ = tr.r1_penalty(_SumScore(), pyr, gamma=4.0)
        assert p4.item() == pytest.approx(4.0 * p1.item(), rel=1e-12)
        p0, _ = tr.r1_penalty(_SumScore(), pyr, gamma=0.0)
        assert p0.item() == 0.0

    def test_differentiable_wrt_weights(self):
        # finite differences over the penalty as a function of one D kernel
        from stwo.nets import Discriminator

        net = tiny_net(channels={2: 3, 3: 3, 4: 3})
        rng = np.random.default_rng(2)
        D = Discriminator(net, rng, dtype=np.float64)
        imgs = np.clip(rng.standard_normal((1, 3, 16, 16)) * 0.3, -1, 1)
        pyr = build_real_pyramid(imgs, 4, 3)
        param = D.params[0]          # fRGB kernel, 3*3 entries
        base = param.data.copy()

        def value(arrs, _i=None):
            param.data = arrs[0].reshape(base.shape)
            pen, _ = tr.r1_penalty(D, pyr, gamma=10.0)
            return np.array(pen.item())

        pen, _ = tr.r1_penalty(D, pyr, gamma=10.0)
        (g,) = ad.grad(pen, [param.tensor])
        num = numeric_grad(lambda arrs: value(arrs), [base.ravel().copy()], 0,
                           h=1e-6)
        param.data = base
        rel = np.abs(g.data.ravel() - num) / (np.abs(num) + 1e-8)
        assert rel.max() < 1e-4

    def test_leaves_inputs_unmarked(self):
        pyr = self._pyramid()
        tr.r1_penalty(_SumScore(), pyr, gamma=10.0)
        assert all(t.grad is None for t in pyr.rgb.values())
        assert all(t.grad is None for t in pyr.texture.values())


class TestGeneratorObjective:
    def test_off_is_plain_loss(self):
        state = tr.build_state(tiny_cfg(config_id="C"))
        loss = ad.tensor(np.array(1.25))
        assert tr.generator_objective(loss, state.G) is loss

    def test_coarse_adds_penalties(self):
        from stwo.stylemod import ortho_penalty

        state = tr.build_state(tiny_cfg(config_id="stgan_wo"))
        loss = ad.tensor(np.array(0.5), dtype=np.float32)
        obj = tr.generator_objective(loss, state.G, ortho_alpha=2.0)
        manual = 0.5 + sum(ortho_penalty(l, 2.0).item()
                           for l in state.G.ortho_layers())
        assert obj.item() == pytest.approx(manual, rel=1e-6)
        assert obj.item() > 0.5


# ---------------------------------------------------------------------------
# the step

class TestTrainStep:
    def test_deterministic_runs(self):
        cfg = tiny_cfg(steps=2)
        s1 = tr.run_training(cfg)
        s2 = tr.run_training(cfg)
        for p, q in zip(all_params(s1), all_params(s2)):
            assert p.name == q.name
            assert np.array_equal(p.data, q.data)
            assert np.array_equal(p.adam_m, q.adam_m)
        for r1, r2 in zip(s1.history, s2.history):
            assert (r1.loss_g, r1.loss_d, r1.r1, r1.ortho) == \
                   (r2.loss_g, r2.loss_d, r2.r1, r2.ortho)
        assert s1.rng.bit_generator.state == s2.rng.bit_generator.state

    def test_zero_lr_freezes_weights(self):
        cfg = tiny_cfg(steps=1, lr_g=0.0, lr_d=0.0)
        state = tr.build_state(cfg)
        before = {p.name: p.data.copy() for p in all_params(state)}
        tr.run_training(cfg, state=state)
        for p in all_params(state):
            assert np.array_equal(p.data, before[p.name]), p.name
            assert p.step_count == 1

    def test_losses_finite_and_logged(self):
        state = tr.run_training(tiny_cfg(steps=3))
        assert state.step == 3
        assert len(state.history) == 3
        for row in state.history:
            for v in (row.loss_g, row.loss_d, row.r1, row.ortho):
                assert np.isfinite(v)
        # decomposition with ortho off logs a zero ortho column
        s2 = tr.run_training(tiny_cfg(config_id="D", steps=1))
        assert s2.history[0].ortho == 0.0

    def test_msg_baseline_step(self):
        state = tr.run_training(tiny_cfg(config_id="baseline", steps=2))
        assert state.step == 2
        assert all(np.isfinite(r.loss_d) for r in state.history)

    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_nan_aborts(self):
        cfg = tiny_cfg(steps=1)
        state = tr.build_state(cfg)
        state.G.params[0].data = np.full_like(state.G.params[0].data, np.nan)
        with pytest.raises(NumericError, match="step 0"):
            tr.run_training(cfg, state=state)

    def test_ema_update_rule(self):
        cfg = tiny_cfg(steps=1, ema_beta=0.5)
        state = tr.build_state(cfg)
        start = {p.name: p.data.copy() for p in state.G.params}
        assert all(np.array_equal(state.ema[n], start[n]) for n in start)
        tr.run_training(cfg, state=state)
        for p in state.G.params:
            manual = start[p.name].copy()
            manual *= 0.5
            manual += 0.5 * p.data
            assert np.array_equal(state.ema[p.name], manual), p.name

    def test_ema_disabled(self):
        state = tr.run_training(tiny_cfg(steps=1, ema_enabled=False))
        assert state.ema is None

    def test_param_names_unique_across_models(self):
        state = tr.build_state(tiny_cfg())
        names = [p.name for p in all_params(state)]
        assert len(names) == len(set(names))

    def test_csv_log(self, tmp_path):
        log = tmp_path / "log.csv"
        cfg = tiny_cfg(steps=2)
        state = tr.run_training(cfg, log_path=str(log))
        lines = log.read_text().strip().splitlines()
        assert lines[0] == "step,loss_g,loss_d,r1,ortho,seconds"
        assert len(lines) == 3
        assert lines[1].split(",")[0] == "1"
        # resume appends without duplicating the header
        state = tr.run_training(dataclasses.replace(cfg, steps=3),
                                log_path=str(log), state=state)
        lines = log.read_text().strip().splitlines()
        assert len(lines) == 4 and state.step == 3
        assert sum(1 for l in lines if l.startswith("step")) == 1


# ---------------------------------------------------------------------------
# checkpoint container

class TestBlob:
    def test_roundtrip(self, tmp_path):
        p = str(tmp_path / "b.stwo")
        rng = np.random.default_rng(0)
        tensors = [("a", rng.standard_normal((3, 4)).astype(np.float32)),
                   ("b", rng.standard_normal(7)),
                   ("c", np.arange(5, dtype=np.int64))]
        meta = {"kind": "test", "nested": {"x": 1}}
        ckpt.write_blob(p, meta, tensors)
        meta2, tens2 = ckpt.read_blob(p)
        assert meta2 == meta
        assert sorted(tens2) == ["a", "b", "c"]
        for name, arr in tensors:
            assert np.array_equal(tens2[name], arr)
            assert tens2[name].dtype == arr.dtype

    def test_identical_bytes(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        t = [("w", np.ones((2, 2), dtype=np.float32))]
        ckpt.write_blob(a, {"s": 1}, t)
        ckpt.write_blob(b, {"s": 1}, t)
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x"
        p.write_bytes(b"NOPE" + b"\0" * 20)
        with pytest.raises(FormatError):
            ckpt.read_blob(str(p))

    def test_bad_version(self, tmp_path):
        p = str(tmp_path / "b.stwo")
        ckpt.write_blob(p, {}, [("a", np.zeros(2))])
        raw = bytearray(open(p, "rb").read())
        raw[4] = 99
        open(p, "wb").write(bytes(raw))
        with pytest.raises(FormatError):
            ckpt.read_blob(p)

    def test_corrupt_payload(self, tmp_path):
        p = str(tmp_path / "b.stwo")
        ckpt.write_blob(p, {}, [("a", np.ones(4))])
        raw = bytearray(open(p, "rb").read())
        raw[-6] ^= 0x40                      # inside the payload
        open(p, "wb").write(bytes(raw))
        with pytest.raises(FormatError):
            ckpt.read_blob(p)

    def test_truncated(self, tmp_path):
        p = str(tmp_path / "b.stwo")
        ckpt.write_blob(p, {}, [("a", np.ones(4))])
        raw = open(p, "rb").read()
        open(p, "wb").write(raw[:10])
        with pytest.raises(FormatError):
            ckpt.read_blob(p)

    def test_duplicate_names_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            ckpt.write_blob(str(tmp_path / "d"), {},
                            [("a", np.ones(1)), ("a", np.ones(1))])

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(FormatError):
            ckpt.write_blob(str(tmp_path / "d"), {},
                            [("a", np.ones(1, dtype=np.complex128))])


class TestCheckpointState:
    def test_roundtrip_bitwise(self, tmp_path):
        p = str(tmp_path / "s.stwo")
        cfg = tiny_cfg(steps=2)
        state = tr.run_training(cfg, checkpoint_path=p)
        back = tr.load_checkpoint(p)
        assert back.step == state.step
        assert back.cfg.to_json_dict() == cfg.to_json_dict()
        for a, b in zip(all_params(state), all_params(back)):
            assert a.name == b.name
            assert np.array_equal(a.data, b.data)
            assert np.array_equal(a.adam_m, b.adam_m)
            assert np.array_equal(a.adam_v, b.adam_v)
            assert a.step_count == b.step_count
        for name in state.ema:
            assert np.array_equal(state.ema[name], back.ema[name])
        assert back.rng.bit_generator.state == state.rng.bit_generator.state

    def test_save_load_save_identical(self, tmp_path):
        p1, p2 = str(tmp_path / "1"), str(tmp_path / "2")
        tr.run_training(tiny_cfg(steps=1), checkpoint_path=p1)
        tr.save_checkpoint(tr.load_checkpoint(p1), p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_resume_equals_straight_run(self, tmp_path):
        p = str(tmp_path / "s.stwo")
        cfg3 = tiny_cfg(steps=3)
        straight = tr.run_training(cfg3)
        tr.run_training(dataclasses.replace(cfg3, steps=2), checkpoint_path=p)
        resumed = tr.run_training(cfg3, state=tr.load_checkpoint(p))
        assert resumed.step == 3
        for a, b in zip(all_params(straight), all_params(resumed)):
            assert np.array_equal(a.data, b.data), a.name
        last_a, last_b = straight.history[-1], resumed.history[-1]
        assert (last_a.loss_g, last_a.loss_d) == (last_b.loss_g, last_b.loss_d)

    def test_missing_tensor(self, tmp_path):
        p = str(tmp_path / "s.stwo")
        tr.run_training(tiny_cfg(steps=1), checkpoint_path=p)
        meta, tensors = ckpt.read_blob(p)
        key = next(k for k in tensors if k.startswith("adam_m:"))
        del tensors[key]
        ckpt.write_blob(p, meta, sorted(tensors.items()))
        with pytest.raises(FormatError, match="missing"):
            tr.load_checkpoint(p)

    def test_unknown_tensor(self, tmp_path):
        p = str(tmp_path / "s.stwo")
        tr.run_training(tiny_cfg(steps=1), checkpoint_path=p)
        meta, tensors = ckpt.read_blob(p)
        tensors["param:intruder"] = np.zeros(3)
        ckpt.write_blob(p, meta, sorted(tensors.items()))
        with pytest.raises(FormatError, match="unknown"):
            tr.load_checkpoint(p)

    def test_wrong_kind(self, tmp_path):
        p = str(tmp_path / "s.stwo")
        ckpt.write_blob(p, {"kind": "something"}, [("a", np.ones(1))])
        with pytest.raises(FormatError, match="kind"):
            tr.load_checkpoint(p)


# ---------------------------------------------------------------------------
# behavior over many steps

class TestTrends:
    def test_ortho_penalty_declines_from_noisy_start(self):
        # perturb U and V away from orthonormal, then confirm the regularizer
        # pulls the mean penalty down over 200 steps
        cfg = tiny_cfg(steps=200, seed=5, batch=2, synthetic_count=6,
                       ema_enabled=False)
        state = tr.build_state(cfg)
        rng = np.random.default_rng(0)
        for layer in state.G.ortho_layers():
            layer.U.data = layer.U.data + 0.3 * rng.standard_normal(
                layer.U.data.shape).astype(layer.U.data.dtype)
            layer.V.data = layer.V.data + 0.3 * rng.standard_normal(
                layer.V.data.shape).astype(layer.V.data.dtype)

        def mean_pen(G):
            layers = G.ortho_layers()
            from stwo.stylemod import ortho_penalty
            return sum(ortho_penalty(l, 1.0).item()
                       for l in layers) / len(layers)

        start = mean_pen(state.G)
        tr.run_training(cfg, state=state)
        end = mean_pen(state.G)
        assert end < start
