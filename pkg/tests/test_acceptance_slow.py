"""
Desk-scale learning checks on the synthetic gait corpus (desk config: 2000/200
sequences, O = P = 25, 40 epochs). These train real blocks and take tens of
minutes on CPU; run them with `pytest -m slow`.
"""
import os

import pytest

from models import load_run_config
from modules.tcd_forecast.cascade_pipeline import DiffusionBlock, parse_pipeline_spec
from modules.tcd_forecast.metrics_eval import evaluate, prepare_test_set
from modules.tcd_forecast.sequence_core import OcclusionPattern, fit_scale
from modules.tcd_forecast.trainer import train
from modules.tcd_forecast.utils import derive_seed

from conftest import synthetic_corpus

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
DESK_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data", "config",
                           "run_desk.json")


class DeskRun:
    """One seed of the desk experiment: corpus, lazily trained blocks, evaluations."""

    def __init__(self, seed):
        self.cfg = load_run_config(DESK_CONFIG, overrides=[f"seed={seed}"], environ={})
        data = self.cfg.data
        self.O, self.P = data.O, data.P
        self.train_set = synthetic_corpus(data.n_train, self.O + self.P, self.O, seed=derive_seed(seed, "train"))
        self.test_set = synthetic_corpus(data.n_test, self.O + self.P, self.O, seed=derive_seed(seed, "test"))
        self.data_std = fit_scale(self.test_set, self.O)
        self._blocks = {}

    def block(self, role, temporal=True):
        key = (role, temporal)
        if key not in self._blocks:
            train_cfg = self.cfg.train_config(role)
            frames, _ = train_cfg.canvas
            section = self.cfg.denoiser.model_copy(update={"temporal": temporal})
            denoiser_cfg = section.to_core(frames, self.train_set[0].joints, self.cfg.schedule.T,
                                           refine=role == "refine")
            self._blocks[key] = DiffusionBlock.from_checkpoint(train(self.train_set, train_cfg, denoiser_cfg))
        return self._blocks[key]

    def evaluate(self, spec, pattern=None, temporal=True):
        roles = {"tcd": ["short", "long"], "single": ["single"]}
        base = spec.replace("pre+", "").replace("+refine", "")
        needed = roles.get(base, []) + (["pre"] if spec.startswith("pre+") else []) + \
            (["refine"] if spec.endswith("+refine") else [])
        blocks = {role: self.block(role, temporal) for role in needed}
        pipeline = parse_pipeline_spec(spec, blocks, self.cfg.cascade_config())
        protocol = self.cfg.eval_protocol()
        items = prepare_test_set(self.test_set, pattern or OcclusionPattern("full"), self.O, self.P,
                                 derive_seed(protocol.seed, "regime"))
        return evaluate(pipeline, items, protocol)


@pytest.fixture(scope="module")
def desk():
    runs = {}

    def get(seed):
        if seed not in runs:
            runs[seed] = DeskRun(seed)
        return runs[seed]
    return get


@pytest.mark.parametrize("seed", SEEDS)
def test_cascade_beats_zero_velocity(desk, seed):
    run = desk(seed)
    assert run.evaluate("tcd").value("ADE") <= 0.7 * run.evaluate("zero_vel").value("ADE")


@pytest.mark.parametrize("seed", SEEDS)
def test_repair_under_random_joint_occlusion(desk, seed):
    run = desk(seed)
    occluded = OcclusionPattern("random_joint", prob=0.4)
    repaired = run.evaluate("pre+zero_vel", occluded)
    clean = run.evaluate("zero_vel")
    assert repaired.value("repair_ADE") <= 0.15 * run.data_std
    assert repaired.value("FDE") <= 1.05 * clean.value("FDE")


@pytest.mark.parametrize("seed", SEEDS)
def test_refinement_improves_zero_velocity(desk, seed):
    run = desk(seed)
    assert run.evaluate("zero_vel+refine").value("ADE") < run.evaluate("zero_vel").value("ADE")


def test_one_level_sampling_is_not_better_than_the_cascade(desk):
    wins = [desk(seed).evaluate("single").value("ADE") >= desk(seed).evaluate("tcd").value("ADE")
            for seed in SEEDS]
    assert sum(wins) >= 2


def test_removing_temporal_attention_degrades_forecasts(desk):
    wins = [desk(seed).evaluate("tcd", temporal=False).value("ADE") >= 2 * desk(seed).evaluate("tcd").value("ADE")
            for seed in SEEDS]
    assert sum(wins) >= 2
