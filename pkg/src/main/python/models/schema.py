#!/usr/bin/env python3
"""
Problem File Schema

Pydantic models for the JSON problem documents and the per-run options they may carry,
plus the loader that turns a document into a validated problem.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, ValidationError, model_validator

from ..core.numerics import TimeGrid
from ..utils.errors import ConfigurationError
from .problem import AnyProblem, DmPartition, SubsystemBlocks, assemble_augmented, make_problem

logger = logging.getLogger(__name__)

NF_FIELDS = ("b", "F", "E", "m", "N_T", "kappa", "s")


class PartitionSpec(BaseModel):
    """Per-DM dimensions"""
    state_dims: List[int]
    decision_dims: List[int]
    noise_dims: List[int]


class MatricesSpec(BaseModel):
    """Coefficient arrays: constant (row-major nested lists) or per-node stacks"""
    A: Optional[Any] = None
    B: Optional[Any] = None
    G: Optional[Any] = None
    H: Any
    R: Any
    M_T: Any
    b: Optional[Any] = None
    F: Optional[Any] = None
    E: Optional[Any] = None
    m: Optional[Any] = None
    N_T: Optional[Any] = None
    kappa: Optional[List[Any]] = None
    s: Optional[List[Any]] = None

    def has_nf_terms(self) -> bool:
        return any(getattr(self, name) is not None for name in NF_FIELDS)


class SubsystemSpec(BaseModel):
    """Row of blocks of one subsystem, keyed by the 1-based index of the column subsystem"""
    A: Dict[str, Any] = {}
    B: Dict[str, Any] = {}
    G: Optional[Any] = None


class InitialStateSpec(BaseModel):
    mean: Optional[List[float]] = None
    cov: Optional[List[List[float]]] = None


class PicardOptions(BaseModel):
    max_iter: Optional[int] = Field(None, ge=1)
    tol: Optional[float] = Field(None, gt=0)
    damping: Optional[float] = Field(None, gt=0, le=1)
    method: Literal["picard", "collocation"] = "picard"


class DetuneSpec(BaseModel):
    """Distort K^dm inside the strategy under test (fixture for failing checks)"""
    dm: int = Field(1, ge=1)
    shift: Optional[float] = None
    scale: Optional[float] = None


class VerifyOptions(BaseModel):
    eps_list: Optional[List[float]] = None
    n_directions: Optional[int] = Field(None, ge=1)
    n_paths: Optional[int] = Field(None, ge=1)
    regression: bool = False
    detune: Optional[DetuneSpec] = None


class SweepOptions(BaseModel):
    values: List[float] = []
    target: Literal["all", "A", "B", "H", "R", "M_T"] = "all"


class RunSection(BaseModel):
    """Optional per-run options stored next to the problem data"""
    n_paths: Optional[int] = Field(None, ge=1)
    seed: Optional[int] = Field(None, ge=0)
    scheme: Optional[Literal["euler", "rk4"]] = None
    mode: Optional[Literal["centralized", "decentralized"]] = None
    picard: PicardOptions = PicardOptions()
    verify: VerifyOptions = VerifyOptions()
    sweep: SweepOptions = SweepOptions()


class ProblemFile(BaseModel):
    """Top-level problem document"""
    horizon: float = Field(gt=0)
    n_steps: int = Field(ge=2)
    partition: PartitionSpec
    matrices: MatricesSpec
    subsystems: Optional[List[SubsystemSpec]] = None
    x0: InitialStateSpec = InitialStateSpec()
    run: RunSection = RunSection()

    @model_validator(mode="after")
    def _dynamics_given_once(self):
        explicit = [name for name in ("A", "B", "G") if getattr(self.matrices, name) is not None]
        if self.subsystems is None and len(explicit) != 3:
            raise ValueError("matrices.A, matrices.B and matrices.G are required without 'subsystems'")
        if self.subsystems is not None and explicit:
            raise ValueError("give the dynamics either as matrices.A/B/G or as 'subsystems', not both")
        return self


def parse_problem_file(document: Dict[str, Any]) -> ProblemFile:
    try:
        return ProblemFile.model_validate(document)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid problem file: {e}", kind="invalid_config") from e


def build_problem(problem_file: ProblemFile) -> AnyProblem:
    """Turn a parsed document into a validated LqfProblem or NfProblem"""
    grid = TimeGrid(float(problem_file.horizon), int(problem_file.n_steps))
    part = problem_file.partition
    partition = DmPartition(part.state_dims, part.decision_dims, part.noise_dims)
    mats = problem_file.matrices

    if problem_file.subsystems is not None:
        if len(problem_file.subsystems) != partition.N:
            raise ConfigurationError(f"{len(problem_file.subsystems)} subsystems given for {partition.N} DMs",
                                     kind="dimension_mismatch")
        if mats.has_nf_terms():
            raise ConfigurationError("NF terms require explicit matrices.A/B/G", kind="invalid_config")
        blocks = [
            SubsystemBlocks(
                state_dim=partition.state_dims[i], decision_dim=partition.decision_dims[i],
                noise_dim=partition.noise_dims[i],
                A={int(j): v for j, v in sub.A.items()}, B={int(j): v for j, v in sub.B.items()}, G=sub.G)
            for i, sub in enumerate(problem_file.subsystems)
        ]
        return assemble_augmented(blocks, grid, mats.H, mats.R, mats.M_T, problem_file.x0.mean, problem_file.x0.cov)

    nf_terms = {}
    if mats.has_nf_terms():
        nf_terms = dict(b=mats.b, F=mats.F, E=mats.E, m_lin=mats.m, N_T=mats.N_T,
                        kappa=mats.kappa, s_coef=mats.s)
    return make_problem(grid, partition, mats.A, mats.B, mats.G, mats.H, mats.R, mats.M_T,
                        problem_file.x0.mean, problem_file.x0.cov, **nf_terms)


def load_problem(path: Union[str, Path]) -> Tuple[AnyProblem, ProblemFile]:
    """Read, parse and validate a JSON problem file"""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Problem file not found: {path}", kind="invalid_config")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Problem file {path} is not valid JSON: {e}", kind="invalid_config") from e

    problem_file = parse_problem_file(document)
    problem = build_problem(problem_file)
    logger.info(f"Loaded problem {path.name}: N={problem.N}, n={problem.n}, d={problem.d}, "
                f"T={problem.grid.T}, n_steps={problem.grid.n_steps}")
    return problem, problem_file
