#!/usr/bin/env python3
"""
Pydantic schemas: experiment configuration, metrics report, service API
"""

from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


class StrictModel(BaseModel):
    """Config base: unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class ModelKind(str, Enum):
    LINEAR = "linear"
    MLP = "mlp"


class ModelSpec(BaseModel):
    """Flattened-parameter model description shared by every client"""
    model_config = ConfigDict(frozen=True)

    kind: ModelKind = ModelKind.LINEAR
    input_dim: int = Field(..., gt=0)
    num_classes: int = Field(..., ge=2)
    hidden_dim: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_hidden(self):
        if self.kind == ModelKind.MLP and self.hidden_dim < 1:
            raise ValueError("mlp model requires hidden_dim >= 1")
        return self

    @property
    def layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """(name, shape) blocks in flattening order"""
        d, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == ModelKind.LINEAR:
            return [("W", (d, c)), ("b", (c,))]
        return [("W1", (d, h)), ("b1", (h,)), ("W2", (h, c)), ("b2", (c,))]

    @property
    def param_count(self) -> int:
        total = 0
        for _, shape in self.layout:
            size = 1
            for dim in shape:
                size *= dim
            total += size
        return total


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

class DataConfig(StrictModel):
    source: Literal["synthetic", "idx"] = "synthetic"
    samples_per_client: int = Field(200, gt=0)
    dims: int = Field(100, gt=0)
    num_classes: int = Field(10, ge=2)
    skew: float = Field(0.5, ge=0.0, le=1.0)
    test_samples: int = Field(1000, gt=0)
    class_sep: float = Field(0.2, gt=0.0)
    # fixes the task across runs; None draws it from the run seed
    seed: Optional[int] = None
    idx_train_images: Optional[str] = None
    idx_train_labels: Optional[str] = None
    idx_test_images: Optional[str] = None
    idx_test_labels: Optional[str] = None

    @model_validator(mode="after")
    def _check_idx_paths(self):
        if self.source == "idx":
            missing = [name for name in ("idx_train_images", "idx_train_labels",
                                         "idx_test_images", "idx_test_labels")
                       if not getattr(self, name)]
            if missing:
                raise ValueError(f"idx data source needs {', '.join(missing)}")
        return self


class ModelConfig(StrictModel):
    kind: ModelKind = ModelKind.LINEAR
    hidden_dim: int = Field(0, ge=0)


class TrainConfig(StrictModel):
    lr: float = Field(0.1, gt=0.0)
    batch_size: int = Field(20, gt=0)


class DecayConfig(StrictModel):
    kind: Literal["none", "adaptive"] = "none"
    rate: float = Field(0.9, gt=0.0, lt=1.0)
    patience: int = Field(2, ge=1)
    tolerance: float = Field(1e-4, ge=0.0)


class PrivacyConfig(StrictModel):
    enabled: bool = False
    epsilon: float = Field(10.0, gt=0.0)
    delta: float = Field(1e-5, gt=0.0, lt=1.0)
    clip_norm: float = Field(1.0, gt=0.0)
    mechanism: Literal["gaussian", "laplace"] = "gaussian"
    laplace_scale: Optional[float] = Field(None, gt=0.0)
    decay: DecayConfig = Field(default_factory=DecayConfig)
    client_epsilons: Dict[int, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_client_epsilons(self):
        bad = [cid for cid, eps in self.client_epsilons.items() if eps <= 0]
        if bad:
            raise ValueError(f"client epsilons must be > 0 (clients {bad})")
        return self


class WatermarkConfig(StrictModel):
    enabled: bool = False
    detect: bool = True
    snr_db: float = 6.0
    use_len: int = Field(25400, gt=0)
    gamma: float = Field(0.5, gt=0.0, lt=1.0)
    degree: int = Field(15, ge=3, le=20)
    seed_state: int = Field(1, ge=1)


class ChainConfig(StrictModel):
    mode: Literal["grind", "sampled"] = "sampled"
    difficulty_bits: int = Field(4, ge=0, le=64)
    k: float = Field(1.0, gt=0.0)
    c_B: float = Field(40.0, gt=0.0)
    max_tries: int = Field(1 << 22, gt=0)
    reward_pool: int = Field(1000, gt=0)
    miner_subsidy: int = Field(1, ge=0)
    deposit: int = Field(10, gt=0)
    n_bidders: Optional[int] = Field(None, ge=2)
    verify_mode: Literal["recompute", "test_set"] = "recompute"
    verify_tolerance: float = Field(0.02, ge=0.0)
    slash_lazy: bool = False


class NetConfig(StrictModel):
    delay_ticks: int = Field(1, ge=0)
    link_delays: Dict[str, int] = Field(default_factory=dict)
    jitter_ticks: int = Field(0, ge=0)
    drop_prob: float = Field(0.0, ge=0.0, lt=1.0)
    round_deadline_ticks: int = Field(3, ge=1)
    ticks_per_unit: int = Field(10, ge=1)

    def link_delay(self, src: int, dst: int) -> int:
        return self.link_delays.get(f"{src}->{dst}", self.delay_ticks)

    @property
    def max_delay(self) -> int:
        return max([self.delay_ticks, *self.link_delays.values()]) + self.jitter_ticks


class BudgetConfig(StrictModel):
    T_Sum: float = Field(200.0, gt=0.0)
    tau: int = Field(1, ge=1)
    theta: Optional[float] = Field(6.0, gt=0.0)
    t_T: Optional[float] = Field(None, gt=0.0)
    f: float = Field(1.0, gt=0.0)
    c_T: Optional[float] = Field(None, gt=0.0)


class BehaviorConfig(StrictModel):
    lazy_fraction: float = Field(0.0, ge=0.0, lt=1.0)
    disguise_std: float = Field(0.0, ge=0.0)
    exaggeration: float = Field(1.0, gt=0.0)


class OutputConfig(StrictModel):
    dir: Optional[str] = None
    write: bool = True
    metrics_csv: str = "metrics.csv"
    summary_json: str = "summary.json"
    trace_jsonl: Optional[str] = None
    chain_dump: Optional[str] = "chain.bin"


class SimConfig(StrictModel):
    """Complete, seeded experiment description"""
    seed: int = 1
    n_clients: int = Field(20, ge=2)
    rounds: Optional[int] = Field(None, ge=1)
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    privacy: PrivacyConfig = Field(default_factory=PrivacyConfig)
    watermark: WatermarkConfig = Field(default_factory=WatermarkConfig)
    chain: ChainConfig = Field(default_factory=ChainConfig)
    net: NetConfig = Field(default_factory=NetConfig)
    budget: BudgetConfig = Field(default_factory=BudgetConfig)
    behaviors: BehaviorConfig = Field(default_factory=BehaviorConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode="after")
    def _check_bidders(self):
        if self.chain.n_bidders is not None and self.chain.n_bidders < self.n_clients:
            raise ValueError(
                f"chain.n_bidders ({self.chain.n_bidders}) < n_clients ({self.n_clients})")
        return self

    def model_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec(kind=self.model.kind, input_dim=input_dim,
                         num_classes=num_classes, hidden_dim=self.model.hidden_dim)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

class RoundRecord(BaseModel):
    round: int
    train_loss: float
    test_loss: float
    test_accuracy: float
    chain_height: int
    forks_observed: int
    tips_agree: bool
    aggregates_agree: bool
    winning_miner: int
    n_updates: int
    accusations: int
    exclusions: int
    lazy_submissions: int
    lazy_excluded: int
    honest_excluded: int
    sigma: float
    global_digest: str
    block_hash: str


class RunSummary(BaseModel):
    final_accuracy: float
    final_loss: float
    rounds_executed: int
    K: int
    tau: int
    t_T: float
    t_B: float
    theta: float
    lazy_clients: List[int] = Field(default_factory=list)
    total_rewards: Dict[str, int] = Field(default_factory=dict)
    blocks_won: Dict[str, int] = Field(default_factory=dict)
    detection_tpr: Optional[float] = None
    detection_fpr: Optional[float] = None
    final_digest: str = ""
    nodes_agree: bool = True
    ledger_audit: Dict[str, Any] = Field(default_factory=dict)
    wall_clock_seconds: float = 0.0


class MetricsReport(BaseModel):
    seed: int
    rounds: List[RoundRecord]
    summary: RunSummary


# ---------------------------------------------------------------------------
# Service API
# ---------------------------------------------------------------------------

class ToolExecutionRequest(BaseModel):
    """Request model for tool execution"""
    arguments: Dict[str, Any] = Field(default_factory=dict, description="Tool-specific arguments")


class ToolExecutionResponse(BaseModel):
    """Response model for tool execution"""
    success: bool
    content: Optional[Dict[str, Any]] = None
    error: Optional[str] = None
    code: Optional[str] = None
    tool: str
    timestamp: datetime


class ToolInfo(BaseModel):
    name: str
    description: str
    available: bool = True


class ToolsListResponse(BaseModel):
    tools: List[ToolInfo]
    count: int
    timestamp: str


class StatusResponse(BaseModel):
    status: str
    timestamp: datetime
    version: str
    threads: int
    output_dir: str
