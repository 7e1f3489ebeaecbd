import numpy as np
import pytest

from fd import fd_gradient, rel_err, sample_coords
from smug import autodiff as ad
from smug.autodiff import Tensor
from smug.denoiser import Denoiser, DenoiserConfig, DenoiserParams, init_params, zero_params
from smug.mri import AcquisitionModel, build_cartesian_mask, dc_solve, synth_sensitivities
from smug.phantoms import DatasetParams, generate_phantom, make_dataset
from smug.training import (
    REFERENCES,
    AdamState,
    TrainConfig,
    adam_step,
    finetune_loss,
    load_train_state,
    lr_at,
    pretrain_loss,
    run_finetune,
    run_pretrain,
    run_supervised,
    save_train_state,
    select_lambda_ell,
    ustab_loss,
)
from smug.unrolling import NoisePlan, ReconConfig, ReconTrace, reconstruct

SMALL_NET = DenoiserConfig(depth=2, channels=4)
IDENTITY = Denoiser.from_params(zero_params(SMALL_NET))
TIGHT = dict(cg_tol=1e-13, cg_max_iter=400)


def problem(seed=0):
    model = AcquisitionModel(build_cartesian_mask(8, 8, 2, 2, seed), synth_sensitivities(8, 8, 2))
    t = generate_phantom(8, 8, seed)
    return model, t, model.forward(t)


def generic_params(seed):
    # nonzero biases keep ReLU pre-activations off the kink on exactly-zero background pixels
    p = init_params(SMALL_NET, seed)
    rng = np.random.default_rng(seed)
    return DenoiserParams.from_arrays(SMALL_NET, [a if a.ndim > 1 else 0.1 * rng.standard_normal(a.shape)
                                                  for a in p.arrays()])


def flat_grad(loss, den):
    return np.concatenate([g.ravel() for g in ad.grad(loss, den.weights)])


# --- pretrain loss -----------------------------------------------------------

def test_pretrain_identity_expectation():
    t = ad.to_channels(generate_phantom(8, 8, 1))
    sigma, m = 0.1, 10_000
    noise = NoisePlan(0, t.shape).draw(0, m)
    loss = pretrain_loss(IDENTITY, t, sigma, m, noise).item()
    expected = sigma**2 * 2 * 8 * 8
    assert abs(loss / expected - 1) < 0.05
    assert loss == pytest.approx(sigma**2 * np.sum(noise**2) / m, rel=1e-12)


def test_pretrain_sigma_zero_identity():
    t = ad.to_channels(generate_phantom(8, 8, 1))
    assert pretrain_loss(IDENTITY, t, 0.0, 3).item() == 0.0


def test_pretrain_gradient_fd():
    params = init_params(SMALL_NET, 0)
    t = ad.to_channels(generate_phantom(8, 8, 2))
    noise = NoisePlan(1, t.shape).draw(0, 3)

    def f(vec):
        den = Denoiser.from_params(DenoiserParams.unflatten(SMALL_NET, vec))
        return pretrain_loss(den, t, 0.05, 3, noise).item()

    den = Denoiser.from_params(params, requires_grad=True)
    g = flat_grad(pretrain_loss(den, t, 0.05, 3, noise), den)
    assert rel_err(g, fd_gradient(f, params.flatten())) < 1e-4


# --- UStab ---------------------------------------------------------------------

def manual_trace(states, denoised=None):
    tr = ReconTrace("smug", x=[Tensor(s) for s in states])
    from smug.mri import DCStats
    tr.step_stats = [DCStats() for _ in states[:-1]]
    tr.denoised = denoised if denoised is not None else []
    return tr


@pytest.mark.parametrize("reference", REFERENCES)
def test_ustab_zero_when_states_equal_target(reference):
    t = ad.to_channels(generate_phantom(8, 8, 3))[None]
    trace = manual_trace([t, t, t])
    frozen = IDENTITY if reference.startswith("frozen") else None
    # sigma = 0 with fresh evaluation: each term is ||D(t) - ref||^2, zero when ref is D(t) or D = identity
    den = Denoiser.from_params(init_params(SMALL_NET, 0)) if reference in ("D(t)", "D(x_n)") else IDENTITY
    loss = ustab_loss(den, trace, t, 0.0, 1, reference, frozen, reuse_noise=False)
    assert loss.item() == 0.0


def test_ustab_single_step_reference_t():
    t = ad.to_channels(generate_phantom(8, 8, 3))[None]
    x0 = t + 0.1 * np.random.default_rng(0).standard_normal(t.shape)
    trace = manual_trace([x0, x0])
    loss = ustab_loss(IDENTITY, trace, t, 0.0, 1, "t", reuse_noise=False)
    assert loss.item() == pytest.approx(np.sum((x0 - t) ** 2), rel=1e-13)


def test_ustab_five_variants_distinct():
    model, t, y = problem(1)
    den = Denoiser.from_params(init_params(SMALL_NET, 2))
    frozen = Denoiser.from_params(init_params(SMALL_NET, 3))
    cfg = ReconConfig(mode="smug", n_steps=2, m=2)
    _, trace = reconstruct(cfg, den, model, y)
    tch = ad.to_channels(t)
    values = [ustab_loss(den, trace, tch, cfg.sigma, cfg.m, r, frozen).item() for r in REFERENCES]
    assert len(set(values)) == 5


def test_ustab_reuses_forward_draws():
    model, t, y = problem(2)
    den = Denoiser.from_params(init_params(SMALL_NET, 2))
    cfg = ReconConfig(mode="smug", n_steps=2, m=3, sigma=0.05)
    _, trace = reconstruct(cfg, den, model, y)
    tch = ad.to_channels(t)[None]
    brute = 0.0
    for n in range(2):
        draws = trace.noise.draw(n, 3)
        for j in range(3):
            d = den(Tensor(trace.x[n].data + 0.05 * draws[j][None])).data
            brute += np.sum((d - den(Tensor(tch)).data) ** 2) / 3
    assert ustab_loss(den, trace, tch, 0.05, 3).item() == pytest.approx(brute, rel=1e-12)
    fresh = ustab_loss(den, trace, tch, 0.05, 3, reuse_noise=False, noise=trace.noise).item()
    assert fresh != pytest.approx(brute, rel=1e-12)


def test_ustab_mismatch_errors():
    model, t, y = problem()
    _, vanilla_trace = reconstruct(ReconConfig(mode="vanilla", n_steps=2), IDENTITY, model, y)
    with pytest.raises(ValueError, match="vanilla"):
        ustab_loss(IDENTITY, vanilla_trace, ad.to_channels(t), 0.01, 2)
    _, trace = reconstruct(ReconConfig(mode="smug", n_steps=1, m=2), IDENTITY, model, y)
    with pytest.raises(ValueError, match="target"):
        ustab_loss(IDENTITY, trace, np.zeros((1, 4, 4, 2)), 0.01, 2)
    with pytest.raises(ValueError, match="frozen"):
        ustab_loss(IDENTITY, trace, ad.to_channels(t), 0.01, 2, "frozen-D(t)")


def test_frozen_reference_gets_no_gradient():
    model, t, y = problem()
    den = Denoiser.from_params(init_params(SMALL_NET, 0), requires_grad=True)
    frozen = Denoiser.from_params(init_params(SMALL_NET, 1))
    cfg = ReconConfig(mode="smug", n_steps=1, m=2)
    _, trace = reconstruct(cfg, den, model, y)
    loss = ustab_loss(den, trace, ad.to_channels(t), cfg.sigma, cfg.m, "frozen-D(x_n)", frozen)
    assert all(not w.requires_grad for w in frozen.weights)
    assert all(not np.any(g) for g in ad.grad(loss, frozen.weights))
    assert np.any(flat_grad(loss, den))


# --- fine-tuning objective ------------------------------------------------------

def test_finetune_lambda_zero_is_ustab():
    model, t, y = problem()
    den = Denoiser.from_params(init_params(SMALL_NET, 0))
    cfg = ReconConfig(mode="smug", n_steps=2, m=2)
    loss, _, trace = finetune_loss(den, model, y, t, cfg, 0.0)
    assert loss.item() == ustab_loss(den, trace, ad.to_channels(t), cfg.sigma, cfg.m).item()


def test_finetune_closed_form_identity():
    model, t, y = problem(3)
    y = y + 0.05 * np.where(model.mask.rows[:, None], 1.0, 0.0)  # make x_0 differ from t
    cfg = ReconConfig(mode="smug", n_steps=1, sigma=0.0, **TIGHT)
    loss, _, _ = finetune_loss(IDENTITY, model, y, t, cfg, 1.0)
    x0 = model.adjoint(y)
    x1 = dc_solve(model, x0, y, 1.0, tol=1e-13, max_iter=400).x
    expected = np.sum(np.abs(x1 - t) ** 2) + np.sum(np.abs(x0 - t) ** 2)
    assert loss.item() == pytest.approx(expected, rel=1e-10)


def test_finetune_rejects_vanilla():
    model, t, y = problem()
    with pytest.raises(ValueError, match="RS-applied"):
        finetune_loss(IDENTITY, model, y, t, ReconConfig(mode="vanilla"), 1.0)


@pytest.mark.parametrize("lambda_ell", [0.0, 0.1, 1.0])
@pytest.mark.parametrize("mode", ["smug", "smugv0"])
def test_finetune_gradient_fd(lambda_ell, mode):
    model, t, y = problem(4)
    params = generic_params(5)
    cfg = ReconConfig(mode=mode, n_steps=2, m=2, **TIGHT)
    plan = NoisePlan(3, (8, 8, 2))

    def f(vec):
        den = Denoiser.from_params(DenoiserParams.unflatten(SMALL_NET, vec))
        return finetune_loss(den, model, y, t, cfg, lambda_ell, noise=plan)[0].item()

    den = Denoiser.from_params(params, requires_grad=True)
    g = flat_grad(finetune_loss(den, model, y, t, cfg, lambda_ell, noise=plan)[0], den)
    coords = sample_coords(g.size, 80, seed=1)
    assert rel_err(g[coords], fd_gradient(f, params.flatten(), coords=coords)) < 1e-4


# --- Adam and schedule --------------------------------------------------------------

def test_adam_zero_gradient_no_change():
    p = [np.array([1.0, -2.0])]
    out = adam_step(AdamState.zeros_like(p), p, [np.zeros(2)], 0.1)
    assert np.array_equal(out[0], p[0])


def test_adam_first_step_quadratic():
    w = np.array([1.0])
    out = adam_step(AdamState.zeros_like([w]), [w], [2 * w], 0.1)
    assert out[0][0] == pytest.approx(0.9, abs=1e-8)


def test_adam_deterministic_trajectory():
    def run():
        w = [np.array([1.0, 3.0])]
        st = AdamState.zeros_like(w)
        for _ in range(20):
            w = adam_step(st, w, [2 * w[0]], 0.05)
        return w[0]
    assert np.array_equal(run(), run())


def test_adam_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        adam_step(AdamState.zeros_like([np.zeros(2)]), [np.zeros(2)], [np.zeros(3)], 0.1)


def test_lr_schedule():
    cfg = TrainConfig()
    lrs = [lr_at(e, cfg) for e in range(cfg.epochs)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(lr == cfg.lr_initial for lr in lrs[:cfg.decay_start + 1])
    assert lrs[-1] == 0.0


@pytest.mark.parametrize("bad", [dict(lr_initial=0.0), dict(beta1=1.0), dict(lambda_ell=-1.0),
                                 dict(reference="x"), dict(epochs=-1)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_select_lambda_ell():
    clean = {0.1: 26.08, 1.0: 26.08, 10.0: 26.65}
    assert select_lambda_ell(clean, vanilla_clean=26.63) == 10.0
    assert select_lambda_ell(clean, vanilla_clean=26.0) == 0.1
    with pytest.raises(ValueError):
        select_lambda_ell({}, 1.0)


# --- loops ---------------------------------------------------------------------------

TOY = DatasetParams(height=16, width=16, n_coils=2)


@pytest.fixture(scope="module")
def toy():
    return make_dataset("train", 4, TOY, 0), make_dataset("val", 2, TOY, 0)


def test_zero_epochs_returns_init(toy):
    init = init_params(SMALL_NET, 0)
    st = run_pretrain(toy[0], init, TrainConfig(epochs=0))
    assert all(np.array_equal(a, b) for a, b in zip(st.params.arrays(), init.arrays()))
    assert st.history == []


def test_empty_dataset_rejected(toy):
    empty = make_dataset("train", 0, TOY, 0)
    with pytest.raises(ValueError, match="empty"):
        run_pretrain(empty, init_params(SMALL_NET, 0), TrainConfig(epochs=1))


def test_resume_is_bit_exact(toy, tmp_path):
    train, val = toy
    cfg = TrainConfig(epochs=3, decay_start=1, m=2, lr_initial=3e-3)
    recon = ReconConfig(mode="smug", n_steps=1, m=2)
    init = init_params(SMALL_NET, 0)
    full = run_finetune(train, init, cfg, recon, val=(val, recon), record_time=False)

    partial = run_finetune(train, init, TrainConfig(**{**cfg.__dict__, "epochs": 2}), recon,
                           val=(val, recon), record_time=False)
    save_train_state(partial, tmp_path / "ck", {"note": 1})
    state, meta = load_train_state(tmp_path / "ck")
    assert meta == {"note": 1}
    resumed = run_finetune(train, init, cfg, recon, val=(val, recon), state=state, record_time=False)
    assert all(np.array_equal(a, b) for a, b in zip(full.params.arrays(), resumed.params.arrays()))
    assert all(np.array_equal(a, b) for a, b in zip(full.best_params.arrays(), resumed.best_params.arrays()))
    assert [r.train_loss for r in full.history] == [r.train_loss for r in resumed.history]


def test_threads_do_not_change_result(toy):
    train, _ = toy
    cfg = TrainConfig(epochs=1, m=2, batch_size=4)
    recon = ReconConfig(mode="vanilla", n_steps=1)
    a = run_supervised(train, init_params(SMALL_NET, 0), cfg, recon, record_time=False)
    b = run_supervised(train, init_params(SMALL_NET, 0), cfg, recon, record_time=False, threads=3)
    assert all(np.array_equal(x, y) for x, y in zip(a.params.arrays(), b.params.arrays()))


def test_best_on_validation_kept(toy):
    train, val = toy
    recon = ReconConfig(mode="vanilla", n_steps=1)
    st = run_supervised(train, init_params(SMALL_NET, 0), TrainConfig(epochs=3, decay_start=1), recon,
                        val=(val, recon))
    best_epoch = int(np.argmax([r.val_psnr for r in st.history]))
    assert st.best_val == st.history[best_epoch].val_psnr
    assert len(st.history) == 3


def test_finetune_requires_smoothed_mode(toy):
    with pytest.raises(ValueError, match="RS-applied"):
        run_finetune(toy[0], init_params(SMALL_NET, 0), TrainConfig(epochs=1), ReconConfig(mode="rs-e2e"))


def test_pretrain_loss_halves_at_default_config():
    train = make_dataset("train", 40, DatasetParams(), 0)
    st = run_pretrain(train, init_params(DenoiserConfig(), 0), TrainConfig())
    first, last = st.history[0].train_loss, st.history[-1].train_loss
    assert last <= 0.5 * first
