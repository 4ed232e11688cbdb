# schemas.py - result records returned by the tuner and printed by the CLI

from typing import Dict, List, Optional

from pydantic import BaseModel, Field

CLASS_NAMES = ("car", "pedestrian", "cyclist")
PARAM_GROUPS = ("head", "backbone", "biases", "prompts", "pools", "generators", "lora")


# ==================== PARAMETER ACCOUNTING ====================

class ParamReport(BaseModel):
    """Trainable scalar counts per parameter group under one tuning mode"""
    mode: str
    head: int = 0
    backbone: int = 0
    biases: int = 0
    prompts: int = 0
    pools: int = 0
    generators: int = 0
    lora: int = 0
    trainable: int = Field(..., description="Sum of the group counts above")
    total: int = Field(..., description="Every scalar in the model, frozen or not")

    def groups(self) -> Dict[str, int]:
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def to_table(self) -> str:
        width = max(len(name) for name in PARAM_GROUPS + ("trainable",))
        lines = [f"mode: {self.mode}"]
        for name, count in self.groups().items():
            lines.append(f"{name:<{width}}  {count:>12,}")
        lines.append(f"{'trainable':<{width}}  {self.trainable:>12,}")
        lines.append(f"{'total':<{width}}  {self.total:>12,}")
        return "\n".join(lines)

    def to_kv(self) -> str:
        pairs = {"mode": self.mode, **self.groups(), "trainable": self.trainable, "total": self.total}
        return "".join(f"{key}={value}\n" for key, value in pairs.items())


# ==================== TRAINING ====================

class EpochRecord(BaseModel):
    epoch: int = Field(..., ge=0)
    loss: float  # mean detection loss
    key_loss: float = 0.0  # mean key-pull term, optimised alongside but not part of ``loss``
    lr: float
    mode: str
    seed: int


class TrainLog(BaseModel):
    mode: str
    seed: int
    scenes_used: int = Field(0, ge=0)
    epochs: List[EpochRecord] = Field(default_factory=list)

    @property
    def initial_loss(self) -> Optional[float]:
        return self.epochs[0].loss if self.epochs else None

    @property
    def final_loss(self) -> Optional[float]:
        return self.epochs[-1].loss if self.epochs else None

    def to_jsonl(self) -> str:
        return "".join(record.model_dump_json() + "\n" for record in self.epochs)


# ==================== EVALUATION ====================

class ClassMetrics(BaseModel):
    """Cell-level detection counts and scores for one class"""
    true_positives: int = 0
    predictions: int = 0
    hits: int = 0
    labels: int = 0
    precision: float = Field(..., ge=0.0, le=1.0)
    recall: float = Field(..., ge=0.0, le=1.0)
    f1: float = Field(..., ge=0.0, le=1.0)


class EvalMetrics(BaseModel):
    per_class: Dict[str, ClassMetrics]
    mean_precision: float
    mean_recall: float
    mean_f1: float

    def to_table(self) -> str:
        lines = [f"{'class':<11} {'precision':>9} {'recall':>9} {'f1':>9}"]
        for name in CLASS_NAMES:
            m = self.per_class[name]
            lines.append(f"{name:<11} {m.precision:>9.4f} {m.recall:>9.4f} {m.f1:>9.4f}")
        lines.append(f"{'mean':<11} {self.mean_precision:>9.4f} {self.mean_recall:>9.4f} {self.mean_f1:>9.4f}")
        return "\n".join(lines)


# ==================== EXPERIMENTS ====================

class SweepRow(BaseModel):
    param: str
    value: float
    final_loss: Optional[float] = None
    mean_f1: float
    trainable: int


class SweepReport(BaseModel):
    param: str
    rows: List[SweepRow] = Field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["param,value,final_loss,mean_f1,trainable"]
        for row in self.rows:
            loss = "" if row.final_loss is None else repr(row.final_loss)
            lines.append(f"{row.param},{row.value!r},{loss},{row.mean_f1!r},{row.trainable}")
        return "\n".join(lines) + "\n"


class BenchResult(BaseModel):
    """Forward-pass timing of the plain backbone against the pooled one"""
    voxels: int
    repeats: int
    baseline_ms: float
    prompted_ms: float
    baseline_params: int
    prompted_params: int
