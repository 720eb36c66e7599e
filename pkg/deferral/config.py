"""
Validated JSON configuration for each CLI command, plus environment settings.
"""

import json
import logging
import os
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .base_losses import BinaryPhi, FamilyTag, MulticlassFamily, PhiTag
from .core import CostKind, CostModel, RegressionLoss
from .errors import InvalidConfigError
from .oracle import BoundSetting, GammaForm, InfimumMode, ScoreGrid
from .surrogates import PsiTag, SurrogateSpec, SurrogateTag
from .training import DEFAULT_BASE_COSTS, Arch, ModelSpec, OptimizerKind, OptimizerSpec, Stage1Loss

logger = logging.getLogger(__name__)

UnitOpen = Annotated[float, Field(gt=0.0, lt=1.0)]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PhiConfig(StrictModel):
    tag: PhiTag = PhiTag.EXP
    k: float = 1.0
    rho: float = 1.0

    def build(self) -> BinaryPhi:
        return BinaryPhi(self.tag, self.k, self.rho)


class FamilyConfig(StrictModel):
    tag: FamilyTag = FamilyTag.COMP_SUM
    mu: float = Field(default=1.0, ge=0.0)
    alpha: UnitOpen = 0.7
    inner: Optional[PhiConfig] = None
    rho: float = Field(default=1.0, gt=0.0)

    def build(self) -> MulticlassFamily:
        inner = self.inner.build() if self.inner is not None else None
        return MulticlassFamily(self.tag, mu=self.mu, alpha=self.alpha, inner=inner, rho=self.rho)


class SurrogateConfig(StrictModel):
    tag: SurrogateTag
    family: Optional[FamilyConfig] = None
    phi: Optional[PhiConfig] = None
    psi: PsiTag = PsiTag.IDENTITY
    mu: float = Field(default=1.0, ge=0.0)
    alpha_s: float = Field(default=1.0, gt=0.0)
    beta_s: float = Field(default=1.0, gt=0.0)
    c: Optional[float] = Field(default=None, ge=0.0, lt=1.0)

    def build(self) -> SurrogateSpec:
        return SurrogateSpec(
            tag=self.tag,
            family=self.family.build() if self.family is not None else None,
            phi=self.phi.build() if self.phi is not None else None,
            psi=self.psi,
            mu=self.mu,
            alpha_s=self.alpha_s,
            beta_s=self.beta_s,
            c=self.c,
        )


class CostConfig(StrictModel):
    kind: CostKind = CostKind.EXPERT_MISCLASSIFICATION
    c: Optional[UnitOpen] = None
    alpha: List[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0])
    beta: List[float] = Field(default_factory=lambda: list(DEFAULT_BASE_COSTS))
    loss: RegressionLoss = RegressionLoss.SQUARED
    loss_bound: Optional[float] = Field(default=None, gt=0.0)

    def build(self, n_e: int, loss_bound: Optional[float] = None) -> CostModel:
        """Cost model for the first ``n_e`` experts."""
        if self.kind == CostKind.CONSTANT:
            if self.c is None:
                raise InvalidConfigError("constant cost needs c")
            return CostModel.constant(self.c, n_e)
        if len(self.alpha) < n_e:
            raise InvalidConfigError(f"cost alpha lists {len(self.alpha)} experts, need {n_e}")
        if self.kind == CostKind.EXPERT_MISCLASSIFICATION:
            if len(self.beta) < n_e:
                raise InvalidConfigError(f"cost beta lists {len(self.beta)} experts, need {n_e}")
            return CostModel.expert_misclassification(self.alpha[:n_e], self.beta[:n_e])
        bound = self.loss_bound or loss_bound
        if bound is None:
            raise InvalidConfigError("regression costs need a loss bound")
        return CostModel.regression_expert(self.alpha[:n_e], bound, self.loss)


class ModelConfig(StrictModel):
    arch: Arch = Arch.LINEAR
    hidden: int = Field(default=16, ge=1)

    def build(self) -> ModelSpec:
        return ModelSpec(arch=self.arch, hidden=self.hidden)


class OptimizerConfig(StrictModel):
    kind: OptimizerKind = OptimizerKind.GD
    lr: float = Field(default=0.5, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    epochs: int = Field(default=300, ge=0)

    def build(self) -> OptimizerSpec:
        return OptimizerSpec(self.kind, self.lr, self.momentum, self.epochs)


class GeneratorConfig(StrictModel):
    task: Literal[
        "expert_disjoint", "counterexample", "realizable", "realizable_abstention", "regression"
    ] = "expert_disjoint"
    n_samples: int = Field(default=600, ge=1)
    # expert_disjoint
    n_classes: int = Field(default=6, ge=2)
    domains: List[List[int]] = Field(default_factory=lambda: [[0, 1], [2, 3], [4, 5]])
    off_domain_accuracy: float = Field(default=0.0, ge=0.0, le=1.0)
    feature_noise: float = Field(default=0.3, ge=0.0)
    # counterexample / realizable / realizable_abstention
    w_abs: List[float] = Field(default_factory=lambda: [1.0, 0.0])
    b_abs: float = 0.0
    w_pred: List[float] = Field(default_factory=lambda: [0.0, 1.0])
    b_pred: float = 0.0
    c: float = Field(default=0.2, ge=0.0, lt=0.5)
    # regression
    target: Literal["sine", "linear", "constant"] = "sine"
    fidelity: List[float] = Field(default_factory=lambda: [2.0, 1.0, 0.5])
    noise: float = Field(default=0.1, ge=0.0)
    n_features: int = Field(default=1, ge=1)


class DiscreteConfig(StrictModel):
    n_points: int = Field(default=3, ge=1)
    n_labels: int = Field(default=2, ge=2)
    n_experts: int = Field(default=1, ge=1)
    cost_low: float = Field(default=0.0, ge=0.0, le=1.0)
    cost_high: float = Field(default=1.0, ge=0.0, le=1.0)
    deterministic: bool = False
    n_candidates: int = Field(default=3, ge=1)

    @model_validator(mode="after")
    def _ordered(self):
        if self.cost_low > self.cost_high:
            raise ValueError("cost_low must not exceed cost_high")
        return self


class GridConfig(StrictModel):
    low: float = -5.0
    high: float = 5.0
    resolution: float = Field(default=0.25, gt=0.0)

    def build(self) -> ScoreGrid:
        return ScoreGrid(self.low, self.high, self.resolution)


class GammaConfig(StrictModel):
    """``endorsed`` uses the form established for the setting; ``generic`` is user supplied."""

    kind: Literal["endorsed", "generic"] = "endorsed"
    beta: float = Field(default=1.0, ge=0.0)
    alpha: float = Field(default=1.0, gt=0.0, le=1.0)
    outer: float = Field(default=1.0, gt=0.0)
    inner: float = Field(default=1.0, gt=0.0)
    linear_floor: bool = False

    def build_generic(self) -> GammaForm:
        return GammaForm.generic(self.beta, self.alpha, self.outer, self.inner, self.linear_floor)


def _default_gradcheck_surrogates() -> List["SurrogateConfig"]:
    comp_sum = FamilyConfig(tag=FamilyTag.COMP_SUM, mu=1.0)
    return [
        SurrogateConfig(tag=SurrogateTag.ABSTAIN_L_MU, mu=1.0, c=0.3),
        SurrogateConfig(tag=SurrogateTag.ABSTAIN_TWO_STAGE, phi=PhiConfig(tag=PhiTag.LOGISTIC), c=0.3),
        SurrogateConfig(tag=SurrogateTag.PR_SINGLE, family=FamilyConfig(tag=FamilyTag.COMP_SUM, mu=2.0), c=0.3),
        SurrogateConfig(tag=SurrogateTag.PR_TWO_STAGE, phi=PhiConfig(tag=PhiTag.EXP), c=0.3),
        SurrogateConfig(tag=SurrogateTag.DEFER_SINGLE, family=comp_sum),
        SurrogateConfig(tag=SurrogateTag.DEFER_TWO_STAGE_SCORE, family=comp_sum),
        SurrogateConfig(tag=SurrogateTag.DEFER_TWO_STAGE_PR, family=comp_sum),
        SurrogateConfig(tag=SurrogateTag.REG_SINGLE, family=comp_sum),
        SurrogateConfig(tag=SurrogateTag.REG_TWO_STAGE, family=comp_sum),
        SurrogateConfig(tag=SurrogateTag.REG_SINGLE_EXPERT, phi=PhiConfig(tag=PhiTag.LOGISTIC)),
    ]


class GradcheckConfig(StrictModel):
    surrogates: List[SurrogateConfig] = Field(default_factory=_default_gradcheck_surrogates)
    n_points: int = Field(default=100, ge=1)
    n_classes: int = Field(default=3, ge=2)
    n_experts: int = Field(default=2, ge=1)
    step: float = Field(default=1e-5, gt=0.0)
    threshold: float = Field(default=1e-5, gt=0.0)
    seed: int = 0


class OracleConfig(StrictModel):
    mu_grid: List[Annotated[float, Field(ge=0.0)]] = Field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0, 3.0])
    c_grid: List[UnitOpen] = Field(default_factory=lambda: [0.1, 0.5, 0.9])
    discrete: DiscreteConfig = Field(default_factory=DiscreteConfig)
    seeds: List[int] = Field(default_factory=lambda: [0])
    c: UnitOpen = 0.3


class BoundsConfig(StrictModel):
    setting: BoundSetting = BoundSetting.ABSTAIN_L_MU
    family: FamilyConfig = Field(default_factory=FamilyConfig)
    c: UnitOpen = 0.5
    discrete: DiscreteConfig = Field(default_factory=DiscreteConfig)
    n_distributions: int = Field(default=5, ge=1)
    n_hypotheses: int = Field(default=200, ge=1)
    grid: GridConfig = Field(default_factory=GridConfig)
    infimum: InfimumMode = InfimumMode.CLOSED_FORM
    gamma: GammaConfig = Field(default_factory=GammaConfig)
    bound_source: Literal["exact", "bracketing"] = "exact"
    loss_bound: float = Field(default=1.0, gt=0.0)
    tolerance: float = Field(default=1e-9, ge=0.0)
    seed: int = 0


class ExperimentConfig(StrictModel):
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    pipeline: Literal["single_stage", "two_stage"] = "single_stage"
    surrogate: Optional[SurrogateConfig] = Field(
        default_factory=lambda: SurrogateConfig(tag=SurrogateTag.DEFER_SINGLE, family=FamilyConfig())
    )
    stage1: Optional[Stage1Loss] = None
    stage1_optimizer: Optional[OptimizerConfig] = None
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    cost: CostConfig = Field(default_factory=CostConfig)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    expert_counts: List[Annotated[int, Field(ge=0)]] = Field(default_factory=lambda: [1, 2, 3])
    max_attempts: int = Field(default=1, ge=1)
    write_traces: bool = True
    write_datasets: bool = False


CommandConfig = Union[GradcheckConfig, OracleConfig, BoundsConfig, ExperimentConfig]

SCHEMAS = {
    "gradcheck": GradcheckConfig,
    "oracle": OracleConfig,
    "bounds": BoundsConfig,
    "experiment": ExperimentConfig,
}


def load_config(command: str, path: Optional[Union[str, Path]] = None) -> CommandConfig:
    """Read and validate the JSON config of ``command``; no path means defaults.

    Raises:
        InvalidConfigError: On unreadable JSON, unknown keys or invalid values.
    """
    if command not in SCHEMAS:
        raise InvalidConfigError(f"unknown command {command!r}")
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise InvalidConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        return SCHEMAS[command].model_validate(raw)
    except ValidationError as exc:
        raise InvalidConfigError(f"invalid {command} config: {exc.errors(include_url=False)}") from exc


class Settings(BaseModel):
    """Process defaults read from the environment (and ``.env``)."""

    threads: int = Field(default=1, ge=1)
    log_level: Optional[str] = None
    out_dir: str = "out"

    @classmethod
    def from_env(cls) -> "Settings":
        load_dotenv()
        try:
            return cls(
                threads=int(os.getenv("DEFERRAL_THREADS", "1")),
                log_level=os.getenv("DEFERRAL_LOG_LEVEL") or None,
                out_dir=os.getenv("DEFERRAL_OUT_DIR", "out"),
            )
        except (ValueError, ValidationError) as exc:
            raise InvalidConfigError(f"invalid environment settings: {exc}") from exc
