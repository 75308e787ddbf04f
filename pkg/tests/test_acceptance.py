"""Acceptance criteria 1-9.  Each test prints one PASS/FAIL line, collected in the terminal summary."""

import json
import time

import numpy as np
import pytest

from psrnet import autograd as ag
from psrnet import layers as nn
from psrnet import pipeline
from psrnet.autograd import Tensor, grad_check
from psrnet.cli import EXIT_OK, main
from psrnet.grid import ReferenceSnapshot, coarsen
from psrnet.metrics import bicubic_upsample, evaluate
from psrnet.pada import DomainClassifier, PadaConfig, pada_finetune
from psrnet.pgnet import (PGNet, PgnetConfig, flow_targets, pg_discriminator_forward, pg_generator_forward,
                          synthesize_series)
from psrnet.stnet import (STNet, StnetConfig, FinetuneConfig, finetune, from_checkpoint, predict,
                          snet_forward, stnet_forward, to_checkpoint)

from conftest import param_grad_check, projected, randomize_merge, record_criterion
from test_layers import naive_conv2d, naive_conv3d
from test_grid import loop_coarsen
from test_metrics import loop_metrics

GRAD_TOL, CONSTRAINT_TOL, ORACLE_TOL = 1e-4, 1e-6, 1e-10


def check(number, passed, detail):
    record_criterion(number, bool(passed), detail)
    assert passed, detail


# -- 1: gradients ------------------------------------------------------------------------

def _layer_cases(rng):
    conv = nn.Conv2d(2, 3, 3, rng, stride=2)
    conv3 = nn.Conv3dTemporal(1, 2, 2, rng)
    bn = nn.BatchNorm2d(2)
    bn.gamma.data[:] = rng.normal(size=2)
    dense = nn.DenseBlock(4, 3, rng, c_side=2)
    randomize_merge(dense, rng)
    other, side = Tensor(rng.normal(size=(3, 2, 4, 4))), Tensor(rng.normal(size=(3, 2, 4, 4)))
    res = nn.ResBlock(2, rng, stride=2)
    lstm = nn.LSTM(3, 4, rng)
    lin = nn.Linear(4, 3, rng)
    table = rng.normal(size=(6, 3))
    coarse = Tensor(rng.uniform(1, 5, size=(2, 1, 2, 2)))
    y = rng.normal(size=(2, 3))
    lab = (rng.random((2, 3)) > 0.5).astype(float)
    P = lambda shape: rng.normal(size=shape)  # noqa: E731
    return {
        "conv2d": (lambda x, w=P((2, 3, 3, 3)): projected(conv(x), w), rng.normal(size=(2, 2, 6, 6))),
        "conv3d_temporal": (lambda x, w=P((2, 2, 2, 3, 3)): projected(conv3(x), w), rng.normal(size=(2, 1, 4, 3, 3))),
        "batch_norm2d": (lambda x, w=P((3, 2, 3, 3)): projected(bn(x), w), rng.normal(size=(3, 2, 3, 3))),
        "pixel_shuffle": (lambda x, w=P((1, 2, 4, 4)): projected(nn.pixel_shuffle(x, 2), w), rng.normal(size=(1, 8, 2, 2))),
        "n2_normalize": (lambda x, w=P((2, 1, 4, 4)): projected(nn.n2_normalize(x, coarse, 2), w),
                         rng.uniform(0.2, 2.0, size=(2, 1, 4, 4))),
        "dense_block": (lambda x, w=P((3, 3, 4, 4)): projected(dense([x, other], side), w), rng.normal(size=(3, 2, 4, 4))),
        "res_block": (lambda x, w=P((2, 2, 3, 3)): projected(res(x), w), rng.normal(size=(2, 2, 6, 6))),
        "lstm": (lambda x, w=P(4): projected(nn.lstm_sequence(x, lstm), w), rng.normal(size=(4, 3))),
        "embedding": (lambda t, w=P((3, 3)): projected(nn.embedding_lookup(t, np.array([1, 4, 1])), w), table),
        "linear": (lambda x, w=P((5, 3)): projected(lin(x), w), rng.normal(size=(5, 4))),
        "mse": (lambda x: nn.mse_loss(x, y), rng.normal(size=(2, 3))),
        "bce": (lambda x: nn.bce_loss(ag.sigmoid(x), lab), rng.normal(size=(2, 3))),
    }


def test_criterion_1_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    errors = {name: grad_check(f, x, 1e-6) for name, (f, x) in _layer_cases(rng).items()}

    st = STNet(StnetConfig(T=4, T_S=2, C_B=3, C_T=2, n=2))
    randomize_merge(st, rng)
    xs = rng.exponential(20.0, size=(2, 4, 2, 2)) + 1.0
    w = rng.normal(size=(2, 1, 4, 4))
    errors["stnet(input)"] = grad_check(lambda x: projected(stnet_forward(st, x), w), xs, 1e-6)
    # biases feeding batch norm have an exactly-zero gradient, which finite differences see only as noise
    skip = {id(b.conv1.bias) for b in st.blocks} | {id(u.conv.bias) for u in st.ups}
    errors["stnet(params)"] = param_grad_check([p for p in st.parameters() if id(p) not in skip],
                                               lambda: projected(stnet_forward(st, Tensor(xs)), w), rng, per_param=3)

    pg = PGNet(PgnetConfig(C_G=4, embed_dim=3, context=3, C_D=2, nH=16, nW=16, n=2, flow_scale=1.0, frame_scale=1.0))
    frames = rng.exponential(1.0, size=(2, 1, 16, 16))
    wd = rng.normal(size=2)
    errors["pgnet discriminator(input)"] = grad_check(lambda f: projected(pg_discriminator_forward(pg, f), wd), frames, 1e-6)
    errors["pgnet discriminator(params)"] = param_grad_check(
        pg.disc.parameters(), lambda: projected(pg_discriminator_forward(pg, Tensor(frames)), wd), rng)
    poi = rng.random((14, 16, 16))
    wg = rng.normal(size=(2, 1, 16, 16))
    errors["pgnet generator(params)"] = param_grad_check(
        pg.gen.parameters(), lambda: projected(pg_generator_forward(pg, [5, 20], poi), wg), rng, per_param=3)

    clf = DomainClassifier(3, 4, 1, rng)
    wc = rng.normal(size=(2, 1, 3, 3))
    errors["domain classifier"] = grad_check(lambda f: projected(clf(f), wc), rng.normal(size=(2, 3, 3, 3)), 1e-6)

    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    check(1, errors[worst] <= GRAD_TOL and elapsed < 120,
          f"{len(errors)} gradient checks, worst {worst} {errors[worst]:.2e} (tol {GRAD_TOL:g}), {elapsed:.1f}s")


# -- 2: coarse constraint ------------------------------------------------------------------

def test_criterion_2_constraint():
    rng = np.random.default_rng(22)
    worst = 0.0
    for trial in range(100):
        n = int(rng.choice([2, 4, 8]))
        T_S = int(rng.choice([1, 2]))
        cfg = StnetConfig(T=2 * T_S, T_S=T_S, C_B=int(rng.integers(2, 5)), C_T=2, n=n, seed=trial,
                          input_scale=float(rng.uniform(0.5, 50)))
        model = STNet(cfg)
        randomize_merge(model, rng, scale=float(rng.uniform(0.1, 1.0)))
        model.train(bool(rng.integers(0, 2)))
        H, W = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.exponential(float(rng.uniform(1, 200)), size=(2, cfg.T, H, W)) * (rng.random((2, cfg.T, H, W)) > 0.2)
        with ag.no_grad():
            out = stnet_forward(model, x).data[:, 0]
        assert np.all(out >= 0)
        last = x[:, -1]
        worst = max(worst, float(np.max(np.abs(coarsen(out, n) - last) / np.maximum(last, 1e-300) * (last > 0))),
                    float(np.max(np.abs(coarsen(out, n)) * (last == 0))))

    pg_worst = 0.0
    for trial in range(100):
        fine = rng.exponential(30.0, size=(12, 8, 8))
        target_coarse = coarsen(rng.exponential(30.0, size=(12, 8, 8)), 2)
        slot = int(rng.integers(4, 8))
        fwd = rng.normal(0, 40, size=(int(rng.integers(0, 4)), 8, 8))
        bwd = rng.normal(0, 40, size=(int(rng.integers(0, 4)), 8, 8))
        frames = synthesize_series(ReferenceSnapshot(fine[slot][None], slot), fwd, bwd, target_coarse, 2)
        assert np.all(frames >= 0)
        expect = target_coarse[slot - len(bwd):slot + len(fwd) + 1]
        pg_worst = max(pg_worst, float(np.max(np.abs(coarsen(frames, 2) - expect) / expect)))
    check(2, worst <= CONSTRAINT_TOL and pg_worst <= CONSTRAINT_TOL,
          f"STNet worst relative error {worst:.1e}, PGNet frames {pg_worst:.1e} over 100 cases each")


# -- 3: oracles -----------------------------------------------------------------------------

def test_criterion_3_oracles():
    rng = np.random.default_rng(33)
    worst = {}

    def note(name, got, expect):
        worst[name] = max(worst.get(name, 0.0), float(np.max(np.abs(np.asarray(got) - np.asarray(expect)))))

    for _ in range(50):
        k, s = int(rng.choice([1, 3, 5])), int(rng.integers(1, 3))
        pad = int(rng.integers(0, k // 2 + 1))
        H, W = int(rng.integers(k, 9)), int(rng.integers(k, 9))
        B, C, O = (int(v) for v in rng.integers(1, 4, size=3))
        x, w, b = rng.normal(size=(B, C, H, W)), rng.normal(size=(O, C, k, k)), rng.normal(size=O)
        note("conv2d", nn.conv2d(Tensor(x), Tensor(w), Tensor(b), s, pad).data, naive_conv2d(x, w, b, s, pad))

        st_ = int(rng.integers(1, 4))
        x3 = rng.normal(size=(1, int(rng.integers(1, 3)), st_ * int(rng.integers(1, 3)), int(rng.integers(1, 7)),
                              int(rng.integers(1, 7))))
        w3, b3 = rng.normal(size=(2, x3.shape[1], st_, 3, 3)), rng.normal(size=2)
        note("conv3d", nn.conv3d_temporal(Tensor(x3), Tensor(w3), Tensor(b3), st_).data, naive_conv3d(x3, w3, b3, st_))

        n = int(rng.integers(1, 5))
        frame = rng.random((n * int(rng.integers(1, 3)), n * int(rng.integers(1, 3))))
        note("coarsen", coarsen(frame, n), loop_coarsen(frame, n))

        r = int(rng.integers(1, 4))
        xs = rng.normal(size=(1, 2 * r * r, int(rng.integers(1, 4)), int(rng.integers(1, 4))))
        expect = np.zeros((1, 2, r * xs.shape[2], r * xs.shape[3]))
        for c in range(2):
            for h in range(xs.shape[2]):
                for w_ in range(xs.shape[3]):
                    for i in range(r):
                        for j in range(r):
                            expect[0, c, r * h + i, r * w_ + j] = xs[0, c * r * r + i * r + j, h, w_]
        note("pixel_shuffle", nn.pixel_shuffle(Tensor(xs), r).data, expect)

        truth = rng.exponential(10.0, size=(2, int(rng.integers(1, 9)), int(rng.integers(2, 9))))
        truth[0, 0, 0] = 0.0
        pred = np.maximum(truth + rng.normal(0, 3, truth.shape), 0)
        got, ref = evaluate(pred, truth).as_dict(), loop_metrics(pred, truth)
        note("metrics", [got[k] for k in ref], list(ref.values()))
    name = max(worst, key=worst.get)
    check(3, all(v <= ORACLE_TOL for v in worst.values()),
          f"5 ops x 50 instances, worst {name} {worst[name]:.1e} (tol {ORACLE_TOL:g})")


# -- 4: flow identity -------------------------------------------------------------------------

def test_criterion_4_flow_identity():
    rng = np.random.default_rng(44)
    exact = True
    for _ in range(20):
        series = rng.integers(0, 500, size=(int(rng.integers(2, 30)), 4, 4)).astype(float)
        flows = flow_targets(series)
        rebuilt = series[0] + np.concatenate([np.zeros((1, 4, 4)), np.cumsum(flows, axis=0)])
        exact &= np.array_equal(rebuilt, series)
    fine = rng.exponential(20.0, size=(20, 8, 8))
    coarse = coarsen(rng.exponential(20.0, size=(20, 8, 8)), 2)
    ref = ReferenceSnapshot(fine[10][None], 10)
    zero_ok = True
    for F in range(1, 10):
        n_fwd = -(-(F - 1) // 2)
        n_bwd = F - 1 - n_fwd
        frames = synthesize_series(ref, np.zeros((n_fwd, 8, 8)), np.zeros((n_bwd, 8, 8)), coarse, 2)
        slots = range(10 - n_bwd, 10 + n_fwd + 1)
        expect = [nn.n2_normalize(Tensor(ref.values[None]), Tensor(coarse[s][None, None]), 2).data[0, 0] for s in slots]
        zero_ok &= len(frames) == F and np.allclose(frames, expect, rtol=1e-12, atol=0)
    check(4, exact and zero_ok, f"prefix-sum reconstruction exact: {exact}; zero flows give N2(ref) for F=1..9: {zero_ok}")


# -- 5: ablation identities ---------------------------------------------------------------------

def test_criterion_5_ablations():
    rng = np.random.default_rng(55)
    model = STNet(StnetConfig(T=4, T_S=2, C_B=4, C_T=2, n=2))
    randomize_merge(model, rng)
    for block in model.blocks:
        block.merge.weight.data[...] = 0.0
    x = rng.exponential(20.0, size=(3, 4, 3, 3))
    snet_same = np.array_equal(stnet_forward(model, x).data, snet_forward(model, x[:, -1:]).data)

    from psrnet.grid import WindowSample
    samples = [WindowSample(rng.exponential(20.0, size=(4, 3, 3)), rng.exponential(5.0, size=(1, 6, 6)), i, i)
               for i in range(10)]
    base = to_checkpoint(STNet(StnetConfig(T=4, T_S=2, C_B=4, C_T=2, n=2, seed=3)))
    a = from_checkpoint(base)
    finetune(a, samples, FinetuneConfig(steps=8, batch_size=3, lr=1e-3, seed=9))
    b = from_checkpoint(base)
    pada_finetune(b, [], samples, PadaConfig(lambda_adv=0.0, steps=8, batch_size=3, lr=1e-3, seed=9))
    sa, sb = a.state_dict(), b.state_dict()
    pada_same = sa.keys() == sb.keys() and all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
    check(5, snet_same and pada_same, f"SNet == STNet with zeroed merges: {snet_same}; PADA(lambda=0) == fine-tune: {pada_same}")


# -- 6-8: desk-scale experiments ---------------------------------------------------------------

def test_criterion_6_desk_learning(tmp_path):
    start = time.perf_counter()
    cfg = pipeline.load_config(profile="desk", overrides={"variants": ["stnet"], "seeds": [0]})
    assert (cfg.city["nH"], cfg.n, cfg.stnet["T"], cfg.city["days"]) == (32, 4, 24, 14)
    pipeline.stage_synth(cfg, 0, tmp_path)
    ckpt = pipeline.stage_pretrain_stnet(cfg, 0, tmp_path)["stnet"]
    scen = pipeline.load_scenario(cfg, tmp_path)
    _, val, _ = pipeline.source_split(cfg, scen, 0)
    truth = np.stack([s.fine_target[0] for s in val])
    model_rmse = evaluate(predict(from_checkpoint(ckpt), val), truth).rmse
    bic_rmse = evaluate(bicubic_upsample(np.stack([s.coarse_seq[-1] for s in val]), cfg.n), truth).rmse
    gain = 1 - model_rmse / bic_rmse
    elapsed = time.perf_counter() - start
    check(6, gain >= 0.10 and elapsed <= 600,
          f"source val RMSE STNet {model_rmse:.3f} vs Bicubic {bic_rmse:.3f} ({gain:.1%} better, need 10%), {elapsed:.0f}s")


def _run(tmp_path, scenario, n):
    cfg = {"scenario": scenario, "n": n, "variants": ["stnet", "stnet+pgnet", "psrnet"], "seeds": [0, 1, 2]}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    start = time.perf_counter()
    assert main(["run-all", "--config", str(path), "--profile", "desk", "--out", str(tmp_path / "run")]) == EXIT_OK
    elapsed = time.perf_counter() - start
    mean = json.loads((tmp_path / "run" / "report.json").read_text())["mean"]
    return {k: v["rmse"] for k, v in mean.items()}, elapsed


def test_criterion_7_cross_city_transfer(tmp_path):
    rmse, elapsed = _run(tmp_path, "cross_city", 4)
    psr, aug, frozen = rmse["psrnet"], rmse["stnet+pgnet"], rmse["stnet"]
    gain = 1 - psr / frozen
    check(7, psr <= aug <= frozen and gain >= 0.05 and elapsed <= 1200,
          f"3-seed mean RMSE PSRNet {psr:.3f} <= STNet+PGNet {aug:.3f} <= STNet {frozen:.3f}; "
          f"PSRNet {gain:.1%} better than STNet (need 5%), {elapsed:.0f}s")


def test_criterion_8_cross_granularity(tmp_path):
    rmse, elapsed = _run(tmp_path, "cross_granularity", 2)
    psr, frozen = rmse["psrnet"], rmse["stnet"]
    check(8, psr < frozen, f"3-seed mean mid->fine RMSE adapted PSRNet {psr:.3f} vs frozen STNet {frozen:.3f}, {elapsed:.0f}s")


# -- 9: determinism -------------------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    from test_cli import tree_bytes, write_config
    config = write_config(tmp_path / "tiny.json")
    runs = []
    for name in ("a", "b"):
        assert main(["run-all", "--config", str(config), "--out", str(tmp_path / name), "--seed", "3"]) == EXIT_OK
        runs.append(tree_bytes(tmp_path / name))
    a, b = runs
    reports = [k for k in a if k.endswith(("report.md", "report.json"))]
    ckpts = [k for k in a if "checkpoints" in k]
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    check(9, same and reports and ckpts,
          f"repeated run-all: {len(reports)} reports and {len(ckpts)} checkpoint files byte-identical: {same}")
