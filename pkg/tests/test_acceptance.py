"""Acceptance suite: one test per criterion, each printing a PASS line with
its measured numbers. Criterion 8 runs the full desk-scale pipeline and is by
far the longest item (target < 30 minutes on a desktop CPU)."""

import dataclasses
import math
import os
import time

import numpy as np
import pytest

from conftest import desk_camera, desk_sim_config
from trisim.autodiff import Tensor, conv2d, conv_transpose2d, l2_normalize
from trisim.cli import main as cli_main
from trisim.config import WorkbenchConfig, named_stream
from trisim.cut import (
    CutConfig,
    Discriminator,
    Generator,
    ProjectionHead,
    load_translator,
    lsgan_d_loss,
    lsgan_g_loss,
    nce_loss,
    patchnce_loss,
)
from trisim.embed import EmbedConfig, extract_embedding, flatten
from trisim.metrics import (
    GaussianStats,
    frechet_distance,
    inception_score_from_probs,
    lowess,
)
from trisim.nn import Linear, instance_norm
from trisim.policy import (
    EnvSetup,
    InputConfig,
    PolicyNet,
    TrainCfg,
    log_prob_t,
    run_experiment,
    smoothed_loss_at_fraction,
)
from trisim.raster import ImageBuffer
from trisim.reward import (
    RewardConfig,
    evaluate_reward,
    inside_triangle,
    project_to_plane,
)
from trisim.sim import (
    SimConfig,
    init_tissue,
    max_strain,
    project_distance_constraint,
    step,
)


def _report(n, detail):
    print(f"\nCRITERION {n}: PASS  ({detail})")


# ---------------------------------------------------------------- criterion 1


def test_criterion_1_triangle_oracle_equivalence():
    rng = np.random.default_rng(202)
    n = 10_000
    a = rng.normal(size=(n, 3))
    b = rng.normal(size=(n, 3))
    c = rng.normal(size=(n, 3))
    u = rng.uniform(-0.5, 1.5, size=n)
    v = rng.uniform(-0.5, 1.5, size=n)
    q = a + u[:, None] * (b - a) + v[:, None] * (c - a)

    t0 = time.perf_counter()
    # vectorized barycentric oracle via the 2x2 Gram system
    e1 = b - a
    e2 = c - a
    d11 = np.sum(e1 * e1, axis=1)
    d12 = np.sum(e1 * e2, axis=1)
    d22 = np.sum(e2 * e2, axis=1)
    r1 = np.sum((q - a) * e1, axis=1)
    r2 = np.sum((q - a) * e2, axis=1)
    det = d11 * d22 - d12 * d12
    ou = (d22 * r1 - d12 * r2) / det
    ov = (d11 * r2 - d12 * r1) / det
    ow = 1.0 - ou - ov
    degenerate = np.abs(det) < 1e-12
    borderline = (
        (np.abs(ou) <= 1e-9) | (np.abs(ov) <= 1e-9) | (np.abs(ow) <= 1e-9) | degenerate
    )
    oracle = (ou >= 0) & (ov >= 0) & (ow >= 0)

    checked = 0
    for i in range(n):
        if borderline[i]:
            continue
        assert inside_triangle(q[i], a[i], b[i], c[i]) == bool(oracle[i])
        checked += 1
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0, f"triangle oracle sweep took {elapsed:.2f}s"
    assert checked > 9_000
    _report(1, f"{checked} non-borderline instances agreed in {elapsed:.2f}s")


# ---------------------------------------------------------------- criterion 2


def _frame_with_red(n_red):
    img = np.zeros((32, 32, 3), dtype=np.uint8)
    img[:, :] = (60, 60, 60)
    img.reshape(-1, 3)[:n_red] = (0, 0, 255)
    return ImageBuffer.create(img)


def test_criterion_2_reward_truth_table():
    grippers = (
        np.array([-1.0, 0.0, -1.0]),
        np.array([1.0, 0.0, -1.0]),
        np.array([0.0, 0.0, 1.0]),
    )
    cfg = RewardConfig(eps1=10, eps2=0.05)
    inside_pts = (np.array([0.0, 0.01, 0.0]), np.array([0.2, -0.01, 0.0]))
    outside_pts = (np.array([5.0, 0.0, 0.0]), np.array([0.0, 0.0, 0.2]))

    r0 = evaluate_reward(_frame_with_red(0), inside_pts, grippers, cfg)
    assert (r0.reward, r0.goal1) == (0.0, False)
    r_half = evaluate_reward(_frame_with_red(25), outside_pts, grippers, cfg)
    assert (r_half.reward, r_half.goal1, r_half.goal2) == (0.5, True, False)
    r_full = evaluate_reward(_frame_with_red(25), inside_pts, grippers, cfg)
    assert (r_full.reward, r_full.goal1, r_full.goal2) == (1.0, True, True)
    # geometry alone never rescues an invisible line
    r_geo = evaluate_reward(_frame_with_red(0), inside_pts, grippers, cfg)
    assert r_geo.reward == 0.0
    _report(2, "rewards 0 / 0.5 / 1 reproduced exactly on constructed fixtures")


# ---------------------------------------------------------------- criterion 3


def test_criterion_3_loss_analytics():
    for n in (1, 7, 63):
        vec = np.ones(16) / 4.0
        negs = np.tile(vec, (n, 1))
        loss = float(nce_loss(Tensor(vec), Tensor(vec), Tensor(negs), 0.07).data)
        assert abs(loss - math.log(n + 1)) < 1e-12

    cfg = CutConfig(lsgan_a=0.0, lsgan_b=1.0)

    class _Const:
        def __init__(self, value):
            self.value = value

        def __call__(self, x):
            return Tensor(np.full((x.shape[0], 1, 2, 2), self.value))

    class _Perfect:
        def __call__(self, x):
            val = cfg.lsgan_b if x.data[0, 0, 0, 0] == 0 else cfg.lsgan_a
            return Tensor(np.full((x.shape[0], 1, 2, 2), val))

    real = Tensor(np.zeros((2, 1, 8, 8)))
    fake = Tensor(np.zeros((2, 1, 8, 8)))
    fake.data[0, 0, 0, 0] = 1.0
    assert abs(float(lsgan_d_loss(_Perfect(), real, fake, cfg).data)) < 1e-12
    mid = _Const((cfg.lsgan_a + cfg.lsgan_b) / 2.0)
    got = float(lsgan_d_loss(mid, real, fake, cfg).data)
    want = 0.25 * (cfg.lsgan_b - cfg.lsgan_a) ** 2
    assert abs(got - want) < 1e-12
    _report(3, "nce = ln(N+1) for N in {1,7,63}; lsgan closed forms within 1e-12")


# ---------------------------------------------------------------- criterion 4


def test_criterion_4_gradient_suite():
    from test_autodiff import central_diff_check

    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    configs = 0

    # convolutions over random stride/pad/shape draws
    for _ in range(4):
        cin, cout, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 4))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = Tensor(rng.normal(size=(2, cin, 8, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(cout, cin, k, k)) * 0.4, requires_grad=True)
        b = Tensor(rng.normal(size=cout), requires_grad=True)
        central_diff_check(
            lambda: (conv2d(x, w, b, stride, pad) ** 2).mean(), [x, w, b], n_coords=4
        )
        configs += 1
    for _ in range(3):
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        stride = int(rng.integers(1, 3))
        x = Tensor(rng.normal(size=(1, cin, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(cin, cout, 4, 4)) * 0.4, requires_grad=True)
        b = Tensor(rng.normal(size=cout), requires_grad=True)
        central_diff_check(
            lambda: (conv_transpose2d(x, w, b, stride, 1) ** 2).mean(), [x, w, b], n_coords=4
        )
        configs += 1

    # linear layers
    for _ in range(3):
        n_in, n_out = int(rng.integers(2, 9)), int(rng.integers(2, 7))
        layer = Linear(n_in, n_out, rng)
        x = Tensor(rng.normal(size=(5, n_in)), requires_grad=True)
        central_diff_check(
            lambda: (layer(x).tanh() ** 2).mean(), [x, layer.w, layer.b], n_coords=4
        )
        configs += 1

    # normalizations
    for _ in range(2):
        ch = int(rng.integers(1, 4))
        x = Tensor(rng.normal(size=(2, ch, 5, 5)), requires_grad=True)
        g = Tensor(rng.normal(size=ch), requires_grad=True)
        b = Tensor(rng.normal(size=ch), requires_grad=True)
        central_diff_check(lambda: (instance_norm(x, g, b) ** 2).mean(), [x, g, b], n_coords=4)
        configs += 1
    x = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    central_diff_check(lambda: (l2_normalize(x, axis=1) * 0.7).sum(), [x], n_coords=5)
    configs += 1

    # activations
    for slope in (0.01, 0.2):
        z = Tensor(rng.normal(size=(9,)) + 0.05, requires_grad=True)
        central_diff_check(lambda: (z.leaky_relu(slope) ** 2).sum(), [z], n_coords=5)
        configs += 1
    z = Tensor(rng.normal(size=(9,)), requires_grad=True)
    central_diff_check(lambda: (z.tanh() ** 2).sum(), [z], n_coords=5)
    configs += 1

    # the three loss families: adversarial (d and g), contrastive, patchwise
    gen = Generator(np.random.default_rng(1), 1, 2)
    disc = Discriminator(np.random.default_rng(2), 1, 2)
    head = ProjectionHead(np.random.default_rng(3), gen.tap_channels, 8, 4)
    ccfg = CutConfig(width=2, patches_per_tap=4, embed_dim=8, head_hidden=4)
    img_x = rng.normal(size=(1, 1, 16, 16))
    img_y = rng.normal(size=(1, 1, 16, 16))
    g_params = list(gen.params().values())[:2]
    d_params = list(disc.params().values())[:2]
    h_params = list(head.params().values())[:2]
    central_diff_check(lambda: lsgan_g_loss(disc, gen(Tensor(img_x)), ccfg), g_params, n_coords=3)
    configs += 1
    central_diff_check(
        lambda: lsgan_d_loss(disc, Tensor(img_y), gen(Tensor(img_x)), ccfg),
        d_params,
        n_coords=3,
    )
    configs += 1
    v = rng.normal(size=6)
    v /= np.linalg.norm(v)
    vp = rng.normal(size=6)
    vp /= np.linalg.norm(vp)
    vn = rng.normal(size=(4, 6))
    vn /= np.linalg.norm(vn, axis=1, keepdims=True)
    vt = Tensor(v.copy(), requires_grad=True)

    def nce_of_raw():
        # re-normalize inside so perturbed inputs stay on the sphere
        return nce_loss(l2_normalize(vt, axis=0), Tensor(vp), Tensor(vn), 0.3)

    central_diff_check(nce_of_raw, [vt], n_coords=4)
    configs += 1
    central_diff_check(
        lambda: patchnce_loss(gen, head, img_x, gen(Tensor(img_x)), ccfg, np.random.default_rng(5)),
        g_params + h_params,
        n_coords=3,
    )
    configs += 1

    # policy heads: squashed log-prob and value outputs for both trunk kinds
    for spec in (("vector", 7), ("image", (16, 16))):
        policy = PolicyNet(spec, np.random.default_rng(6), hidden=8, conv_width=2)
        if spec[0] == "vector":
            obs = rng.normal(size=(3, 7))
        else:
            obs = rng.normal(size=(3, 1, 16, 16))
        u = rng.normal(size=(3, 6))
        hw = np.full(6, 0.5)
        params = [policy.mu.w, policy.log_std, policy.value_head.layers[0].w]

        def policy_loss():
            mu, log_std, value = policy.forward(Tensor(obs))
            return log_prob_t(mu, log_std, u, hw).mean() + (value**2).mean()

        central_diff_check(policy_loss, params, n_coords=4)
        configs += 1

    elapsed = time.perf_counter() - t0
    assert configs >= 20
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"
    _report(4, f"{configs} randomized configurations, rel tol 1e-4, {elapsed:.1f}s")


# ---------------------------------------------------------------- criterion 5


def test_criterion_5_embedding_contract(tiny_translator):
    gen, head = load_translator(tiny_translator)
    assert head.embed_dim == 32
    cfg = EmbedConfig(n_taps=5, patches_per_tap=32, embed_dim=32)
    img = np.random.default_rng(55).normal(size=(1, 1, 64, 64))
    before = {k: v.data.copy() for k, v in {**gen.params(), **head.params()}.items()}
    block = extract_embedding(gen, head, img, cfg)
    obs = flatten(block)
    assert obs.shape == (5120,)
    norms = np.linalg.norm(block.values, axis=2)
    assert np.max(np.abs(norms - 1.0)) < 1e-6
    after = {k: v.data for k, v in {**gen.params(), **head.params()}.items()}
    assert all(np.array_equal(before[k], after[k]) for k in before)
    _report(5, "flattened length 5120, unit norms, parameters bit-identical")


# ---------------------------------------------------------------- criterion 6


def test_criterion_6_metric_closed_forms():
    rng = np.random.default_rng(66)
    worst = 0.0
    for _ in range(100):
        mu1, mu2 = rng.normal(size=2)
        s1, s2 = rng.uniform(0.05, 3.0, size=2)
        a = GaussianStats(np.array([mu1]), np.array([[s1 * s1]]))
        b = GaussianStats(np.array([mu2]), np.array([[s2 * s2]]))
        want = (mu1 - mu2) ** 2 + (s1 - s2) ** 2
        worst = max(worst, abs(frechet_distance(a, b) - want))
    assert worst < 1e-8

    probs = np.tile(np.eye(4), (4, 1))
    mean, _ = inception_score_from_probs(probs, splits=4)
    assert abs(mean - 4.0) < 1e-9

    xs = np.linspace(0, 9, 30)
    ys = 2.5 * xs - 1.0
    assert np.max(np.abs(lowess(xs, ys, 0.4) - ys)) < 1e-9
    _report(6, f"1-D Frechet worst err {worst:.2e}; IS(C=4)=4; lowess linear exact")


# ---------------------------------------------------------------- criterion 7


def test_criterion_7_protocol_shape(tmp_path, desk_sim, desk_cam, desk_reward):
    setup = EnvSetup(sim=desk_sim, camera=desk_cam, reward=desk_reward)
    cfg = TrainCfg()  # paper protocol: 10 runs x 10 checkpoints per variant
    variants = [
        InputConfig("original"),
        InputConfig("translated", "unused.ckpt"),
        InputConfig("embedded", "unused.ckpt"),
    ]
    full = run_experiment(
        cfg, variants, 1.0, np.random.default_rng(7), setup, str(tmp_path / "f"),
        dry_run=True,
    )
    assert full.evaluated_checkpoints == 300
    small = run_experiment(
        cfg, variants, 0.1, np.random.default_rng(7), setup, str(tmp_path / "s"),
        dry_run=True,
    )
    assert small.evaluated_checkpoints == 30
    _report(7, "3 x 10 x 10 = 300 at scale 1; 30 at scale 0.1 (manifest counting)")


# ---------------------------------------------------------------- criterion 9


def test_criterion_9_simulation_invariants():
    cfg = desk_sim_config(stiffness=1.0, solver_iters=20)
    state = init_tissue(cfg)
    anchors = state.positions[state.pinned].copy()
    a = state
    for _ in range(1000):
        a = step(a, cfg)
    assert np.array_equal(a.positions[a.pinned], anchors)

    settled = init_tissue(cfg)
    for _ in range(300):
        settled = step(settled, cfg)
    strain = max_strain(settled)
    assert strain <= 0.02

    b = init_tissue(cfg)
    for _ in range(200):
        b = step(b, cfg)
    c = init_tissue(cfg)
    for _ in range(200):
        c = step(c, cfg)
    assert np.array_equal(b.positions, c.positions)
    assert np.array_equal(b.velocities, c.velocities)
    _report(
        9,
        f"pinned bit-exact over 1000 steps; settled strain {strain*100:.2f}% <= 2%; "
        "trajectories bit-identical",
    )


# ---------------------------------------------------------------- criterion 10


def test_criterion_10_projection_oracle():
    rng = np.random.default_rng(1010)
    worst = 0.0
    for _ in range(1000):
        p_i = rng.normal(size=3)
        p_j = rng.normal(size=3)
        w_i, w_j = rng.uniform(0.0, 2.0, size=2)
        rest = rng.uniform(0.05, 2.0)
        stiff = rng.uniform(0.1, 1.0)
        q_i, q_j = project_distance_constraint(p_i, p_j, w_i, w_j, rest, stiff)
        delta = p_i - p_j
        d = np.linalg.norm(delta)
        wsum = w_i + w_j
        if wsum == 0.0 or d < 1e-12:
            assert np.array_equal(q_i, p_i) and np.array_equal(q_j, p_j)
            continue
        corr = stiff * (d - rest) / (d * wsum) * delta
        worst = max(
            worst,
            float(np.max(np.abs(q_i - (p_i - w_i * corr)))),
            float(np.max(np.abs(q_j - (p_j + w_j * corr)))),
        )
    assert worst < 1e-12
    _report(10, f"1000 random projections, worst deviation {worst:.2e}")


# ---------------------------------------------------------------- criterion 8

DESK_TREND_INI = """
[sim]
grid_nx = 9
grid_ny = 11
pull_substeps = 8
settle_steps = 8

[camera]
width = 64
height = 64

[dataset]
image_size = 64
count_source = 200
count_target = 100

[cut]
epochs = 40
save_every = 10
batch_size = 8
width = 4
head_hidden = 8

[policy]
total_steps_image = 1280
total_steps_embedded = 12800
rollout_steps = 128
n_envs = 4
epochs = 4
batch_size = 64
runs_per_condition = 1
checkpoints_per_run = 10
test_episodes = 10
settle_on_reset = 30
"""

DESK_SEEDS = (101, 102, 103, 104, 105)


def test_criterion_8_desk_scale_trend(tmp_path):
    t_start = time.perf_counter()
    ini = tmp_path / "desk.ini"
    ini.write_text(DESK_TREND_INI)
    data = str(tmp_path / "data")
    trans = str(tmp_path / "trans")

    assert cli_main(["--config", str(ini), "--seed", "0", "gen-dataset", "--out", data]) == 0
    assert (
        cli_main(
            ["--config", str(ini), "--seed", "0", "train-translator", "--data", data, "--out", trans]
        )
        == 0
    )
    ckpts = sorted(os.listdir(trans))
    assert sum(1 for n in ckpts if n.endswith(".ckpt")) == 4  # 40 epochs / save 10
    ckpt = os.path.join(trans, "translator_epoch0040.ckpt")

    cfg = WorkbenchConfig.load(str(ini))
    setup = EnvSetup(
        sim=cfg.sim_config(),
        camera=cfg.camera(),
        reward=cfg.reward_config(),
        settle_on_reset=cfg.get("policy", "settle_on_reset"),
    )
    train_cfg = cfg.train_cfg()

    loss50 = {"original": [], "embedded": []}
    best = {"original": [], "embedded": []}
    for seed in DESK_SEEDS:
        for variant in ("original", "embedded"):
            out = str(tmp_path / f"exp_s{seed}_{variant}")
            icfg = InputConfig(variant, translator_ckpt=ckpt, embed_cfg=cfg.embed_config())
            report = run_experiment(
                train_cfg, [icfg], 1.0, named_stream(seed, "policy"), setup, out
            )
            run = report.runs[0]
            loss50[variant].append(
                smoothed_loss_at_fraction(
                    os.path.join(run.run_dir, "train_log.csv"), 0.5
                )
            )
            best[variant].append(run.best_success)

    med_loss_emb = float(np.median(loss50["embedded"]))
    med_loss_orig = float(np.median(loss50["original"]))
    med_best_emb = float(np.median(best["embedded"]))
    med_best_orig = float(np.median(best["original"]))
    elapsed = time.perf_counter() - t_start

    # the paper reports roughly 65% success for its full-scale embedded
    # configuration; recorded for context, not asserted
    print(
        f"\ndesk trend: loss50 emb={med_loss_emb:.5f} orig={med_loss_orig:.5f}; "
        f"best success emb={med_best_emb:.2f} orig={med_best_orig:.2f}; "
        f"elapsed {elapsed/60:.1f} min (paper context: ~65% at full scale)"
    )
    assert med_loss_emb < med_loss_orig, (
        f"embedded median smoothed loss at 50% wall-clock ({med_loss_emb}) "
        f"not below original ({med_loss_orig})"
    )
    assert med_best_emb >= med_best_orig, (
        f"embedded median best-checkpoint success ({med_best_emb}) "
        f"below original ({med_best_orig})"
    )
    assert elapsed < 1800.0, f"desk trend took {elapsed/60:.1f} min (target < 30)"
    _report(
        8,
        f"median loss@50% {med_loss_emb:.4f} < {med_loss_orig:.4f}; "
        f"median best success {med_best_emb:.2f} >= {med_best_orig:.2f}; "
        f"{elapsed/60:.1f} min",
    )
