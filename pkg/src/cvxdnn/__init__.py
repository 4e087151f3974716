"""Convexified ReLU surrogates, their LP/MIP embeddings and the solvers that run them."""

from .branch_bound import BBOptions, solve_mip
from .embeddings import (BigM, CvxdLP, Embedding, EmbeddingError, Hybrid, PCAR, PCTAR, Pwl, PwlSpec,
                         build_pwl, embed_bigm, embed_cvxd, embed_hybrid, embed_pcar, embed_pctar,
                         propagate_bounds, tabulate_pwl)
from .market import (MarketInstance, build_bidding_model, evaluate_solution, generate_instance, incentive,
                     ingest_prices, purchase_cost, responsiveness)
from .model import ObjSense, OptModel, Sense, SolveResult, Status, VarKind, write_lp_text
from .network import ReluNetwork, TrainConfig, fit, fold_normalization, init_network, make_dataset, relu_forward
from .simplex import SimplexOptions, solve_lp

__version__ = "0.1.0"
