import numpy as np
import pytest

from deskgan import autodiff as ad
from deskgan.dataio import ImageDataset, PhantomConfig
from deskgan.nets import FadeState, StagePlan, init_weights
from deskgan.trainer import (DIAG_COLUMNS, StageSchedule, TrainingDiverged, TrainSchedule, advance_phase,
                             dataset_fetch, generate, list_checkpoints, load_checkpoint, load_generator,
                             new_state, run, save_checkpoint, select_checkpoint, train_step)

PLAN = StagePlan.build((4, 4), [6, 4], latent_dim=8)


@pytest.fixture(scope="module")
def data():
    return ImageDataset.from_phantoms(PhantomConfig(height=8, width=8, seed=1), 40)


def schedule(stable=64, fade=64, bs=4, ramp=((0, 1), (1, 2)), seed=0, **kw):
    return TrainSchedule([StageSchedule(stable, fade, bs), StageSchedule(stable, fade, bs)],
                         n_critic_ramp=list(ramp), seed=seed, **kw)


def params_of(state):
    return {f"{p}/{k}": v.data.copy() for p, net in (("g", state.gen), ("d", state.critic))
            for k, v in net.params.items()}


class TestSchedule:
    def test_ramp_validation(self):
        with pytest.raises(ValueError):
            schedule(ramp=((0, 3), (1, 2)))
        with pytest.raises(ValueError):
            schedule(ramp=((0, 6),))
        with pytest.raises(ValueError):
            schedule(ramp=((1, 1),))

    def test_alpha_ramp(self):
        s = schedule(fade=100)
        assert s.alpha(1, "fade", 0) == 0.0
        assert s.alpha(1, "fade", 25) == 0.25
        assert s.alpha(1, "fade", 100) == 1.0
        assert s.alpha(1, "fade", 150) == 1.0
        assert s.alpha(1, "stable", 0) == 1.0

    def test_n_critic_bound_to_stage(self):
        s = TrainSchedule.desk_default()
        assert [s.n_critic(i) for i in range(4)] == [1, 1, 3, 5]

    def test_round_trip(self):
        s = schedule(total_images_target=500)
        assert TrainSchedule.from_dict(s.to_dict()) == s


class TestTrainStep:
    def test_update_ratio(self, data):
        state = new_state(PLAN, schedule(ramp=((0, 5),)), len(data))
        fetch = dataset_fetch(state, data)
        for _ in range(10):
            train_step(state, fetch)
        # 60 updates in all: 50 critic, 10 generator
        assert (state.critic_updates, state.gen_updates) == (50, 10)
        assert state.images_seen == 50 * 4

    def test_batch_purity(self, data):
        seen, fetched = [], []
        state = new_state(PLAN, schedule(), len(data))
        fetch = dataset_fetch(state, data)

        def tracking_fetch(n, res):
            x, y = fetch(n, res)
            fetched.append(x * np.float32(2) - np.float32(1))
            return x, y

        for _ in range(3):
            train_step(state, tracking_fetch, lambda kind, batch: seen.append((kind, batch.copy())))
        assert [k for k, _ in seen] == ["real", "fake"] * 3
        real_rows = {r.tobytes() for x in fetched for r in x}
        for kind, batch in seen:
            inside = [r.tobytes() in real_rows for r in batch]
            assert all(inside) if kind == "real" else not any(inside)

    def test_deterministic(self, data):
        def go():
            state = new_state(PLAN, schedule(seed=3), len(data))
            fetch = dataset_fetch(state, data)
            for _ in range(4):
                train_step(state, fetch)
            return params_of(state)

        a, b = go(), go()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_training_changes_both_networks(self, data):
        state = new_state(PLAN, schedule(), len(data))
        before = params_of(state)
        train_step(state, dataset_fetch(state, data))
        after = params_of(state)
        assert not np.array_equal(before["g/base.conv.w"], after["g/base.conv.w"])
        assert not np.array_equal(before["d/base.conv.w"], after["d/base.conv.w"])
        # inactive stage-1 layers receive zero gradient and Adam leaves them untouched
        assert np.array_equal(before["g/togray1.w"], after["g/togray1.w"])

    def test_non_finite_surfaces_as_recoverable(self, data):
        state = new_state(PLAN, schedule(), len(data))

        def bad_fetch(n, res):
            x = np.full((n, 1) + res, np.inf, np.float32)
            return x, np.zeros(n, np.int64)

        with pytest.raises(TrainingDiverged):
            train_step(state, bad_fetch)

    def test_diagnostics_rows(self, data):
        state = new_state(PLAN, schedule(log_interval=8), len(data))
        fetch = dataset_fetch(state, data)
        rows = [train_step(state, fetch) for _ in range(4)]
        got = [r for r in rows if r is not None]
        assert [r.images_seen for r in got] == [8, 16]
        assert all(np.isfinite(r.d_bce) and r.grad_mag > 0 and not r.flagged for r in got)


class TestPhases:
    def test_alpha_reaches_one_and_is_monotone(self, data):
        state = new_state(PLAN, schedule(stable=8, fade=16, ramp=((0, 1),)), len(data))
        fetch = dataset_fetch(state, data)
        alphas = []
        advance_phase(state)
        while not state.done:
            alphas.append((state.stage, state.phase, state.fade.alpha))
            train_step(state, fetch)
            advance_phase(state)
        fades = [a for s, p, a in alphas if s == 1 and p == "fade"]
        assert fades == [0.0, 0.25, 0.5, 0.75]
        assert [a for s, p, a in alphas if p == "stable"] == [1.0] * 4
        assert state.phase_images == 8 and state.done

    def test_no_fade_never_below_one(self, data):
        state = new_state(PLAN, schedule(stable=8, fade=0), len(data))
        fetch = dataset_fetch(state, data)
        advance_phase(state)
        while not state.done:
            assert state.fade.alpha == 1.0
            train_step(state, fetch)
            advance_phase(state)
        assert state.stage == 1

    def test_total_images_target(self, data):
        state = new_state(PLAN, schedule(stable=64, total_images_target=8), len(data))
        fetch = dataset_fetch(state, data)
        while not state.done:
            train_step(state, fetch)
            advance_phase(state)
        assert state.images_seen == 8 and state.stage == 0


class TestCheckpoints:
    def test_round_trip_generates_identically(self, data, tmp_path):
        state = new_state(PLAN, schedule(), len(data))
        fetch = dataset_fetch(state, data)
        for _ in range(3):
            train_step(state, fetch)
        before = generate(state.gen, state.fade, 5, [0, 1, 0, 1, 1], seed=9)
        path = save_checkpoint(state, tmp_path)
        assert path.name == f"ckpt_{state.images_seen}"
        assert (path / "gen" / "param.base.conv.w.tnsr").exists()
        assert (path / "critic" / "adam_v.score.w.tnsr").exists()
        gen, fade = load_generator(path)
        assert np.array_equal(generate(gen, fade, 5, [0, 1, 0, 1, 1], seed=9), before)
        back = load_checkpoint(path)
        p0, p1 = params_of(state), params_of(back)
        assert all(np.array_equal(p0[k], p1[k]) for k in p0)
        assert back.gen.store.step == state.gen.store.step

    def test_resume_bit_exact(self, data, tmp_path):
        sched = schedule(stable=32, fade=32, log_interval=8)
        full = run(sched, data, tmp_path / "full", plan=PLAN, write_samples=False)
        part = run(sched, data, tmp_path / "part", plan=PLAN, write_samples=False, max_steps=7)
        resumed = run(sched, data, tmp_path / "part", plan=PLAN, write_samples=False,
                      resume=part.checkpoints[-1])
        assert resumed.images_seen == full.images_seen
        a = (tmp_path / "full" / "diagnostics.csv").read_text()
        b = (tmp_path / "part" / "diagnostics.csv").read_text()
        assert a == b and a.splitlines()[0] == ",".join(DIAG_COLUMNS)
        sa = load_checkpoint(full.checkpoints[-1])
        sb = load_checkpoint(resumed.checkpoints[-1])
        pa, pb = params_of(sa), params_of(sb)
        assert all(np.array_equal(pa[k], pb[k]) for k in pa)

    def test_rollback_on_divergence(self, data, tmp_path):
        calls = {"n": 0}

        def hook(kind, batch):
            calls["n"] += 1
            if calls["n"] == 5:
                raise ad.NonFiniteError("injected")

        rep = run(schedule(stable=16, fade=16), data, tmp_path, plan=PLAN, write_samples=False,
                  on_discriminate=hook)
        assert rep.restarts == 1
        assert rep.images_seen == 16 + 16 + 16

    def test_gives_up_after_max_restarts(self, data, tmp_path):
        def hook(kind, batch):
            raise ad.NonFiniteError("always")

        with pytest.raises(TrainingDiverged):
            run(schedule(), data, tmp_path, plan=PLAN, write_samples=False, on_discriminate=hook, max_restarts=2)

    def test_list_checkpoints_sorted(self, data, tmp_path):
        run(schedule(stable=16, fade=16, checkpoint_interval=16), data, tmp_path, plan=PLAN, write_samples=False)
        names = [p.name for p in list_checkpoints(tmp_path)]
        assert names == ["ckpt_0", "ckpt_16", "ckpt_32", "ckpt_48"]

    def test_samples_written(self, data, tmp_path):
        run(schedule(stable=8, fade=8), data, tmp_path, plan=PLAN)
        assert (tmp_path / "samples" / "grid_final_cc.png").exists()
        assert (tmp_path / "samples" / "grid_final_mlo.png").exists()


class TestSelection:
    def test_single(self, data, tmp_path):
        state = new_state(PLAN, schedule(), len(data))
        p = save_checkpoint(state, tmp_path)
        best, scores = select_checkpoint([p], data.images[:8], n_samples=8)
        assert best == p and len(scores) == 1

    def test_tie_goes_to_later(self, data, tmp_path):
        state = new_state(PLAN, schedule(), len(data))
        a = save_checkpoint(state, tmp_path)
        state.images_seen = 100
        b = save_checkpoint(state, tmp_path)
        best, scores = select_checkpoint([a, b], data.images[:8], n_samples=8)
        assert scores[0] == scores[1] and best == b

    def test_empty(self, data):
        with pytest.raises(ValueError):
            select_checkpoint([], data.images)
