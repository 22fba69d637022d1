from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

REPORT_SCHEMA_VERSION = 1


class ReportModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MethodInfo(ReportModel):
    kind: Literal["exact", "mc"]
    mc_samples: Optional[int] = None
    seed: Optional[int] = None


class FisherReport(ReportModel):
    schema_version: int = REPORT_SCHEMA_VERSION
    family: str
    coordinates: List[str]
    at: List[float]
    matrix: List[List[float]]
    inverse: List[List[float]]
    condition_estimate: float
    method: MethodInfo


class CrbReport(ReportModel):
    schema_version: int = REPORT_SCHEMA_VERSION
    family: str
    coordinates: List[str]
    at: List[float]
    theta: str
    theta_value: float
    differential: List[float]
    gradient: List[float]
    bound: float
    method: MethodInfo


class SeedOutcome(ReportModel):
    seed: int
    variance: float
    std_error: float
    slack: float
    passed: bool


class McVerifySummary(ReportModel):
    bound: float
    mc_samples: int
    outcomes: List[SeedOutcome]
    pass_rate: float
    min_slack: float


class BoundReport(ReportModel):
    """Variance of an estimator next to the bound for the parameter it targets."""

    schema_version: int = REPORT_SCHEMA_VERSION
    family: str
    coordinates: List[str]
    at: List[float]
    theta: str
    estimator: str
    theta_value: float
    estimator_mean: float
    bias: float
    variance: float = Field(ge=0)
    bound: float
    slack: float
    efficiency: Optional[float] = None
    method: MethodInfo
    mc_std_error: Optional[float] = None
    max_probe_bias: float
    biased: bool
    bound_applicable: bool
    passed: bool
    mc_verify: Optional[McVerifySummary] = None


class ProofChainLedger(ReportModel):
    """a = |grad|^2, b = centred integral, c = sqrt(V) sqrt(I(grad, grad)), d = sqrt(V) |grad|."""

    a: float
    b: float
    c: float
    d: float
    violations: List[str] = []

    @property
    def holds(self) -> bool:
        return not self.violations


class CheckResult(ReportModel):
    name: str
    residual: float
    tolerance: float
    passed: bool
    detail: Optional[str] = None


class CheckLedger(ReportModel):
    schema_version: int = REPORT_SCHEMA_VERSION
    family: str
    coordinates: List[str]
    at: List[float]
    checks: List[CheckResult]
    passed: bool


class SweepRow(ReportModel):
    point: float
    theta: Optional[float] = None
    variance: Optional[float] = None
    bound: Optional[float] = None
    slack: Optional[float] = None
    efficiency: Optional[float] = None
    error: Optional[str] = None
