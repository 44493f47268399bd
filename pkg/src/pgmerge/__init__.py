"""Proximity-graph ANN indexes with reverse-neighbor sliding merge and merge-order planning."""
from pgmerge._backend import BACKEND
from pgmerge.errors import FormatError, PgmergeError, UsageError
from pgmerge.mos import (CostMatrix, MergeOrderGraph, build_cost_matrix, mos_plan, multi_merge,
                         pairwise_plan, separated_search)
from pgmerge.partition import PartitionSpec, partition_kmeans, partition_random
from pgmerge.pgraph import (Candidate, ProximityGraph, SearchStats, beam_search, build_index,
                            insert_node, load_index, prune_rng, save_index)
from pgmerge.rnsm import (MergeParams, MergeReport, PivotPlan, ReverseIndex, build_reverse_index,
                          dps_cost, expand_neighbors, naive_merge, rnsm_merge, select_pivots,
                          update_graph)
from pgmerge.vecstore import (GroundTruth, VectorSet, l2_distance, load_fvecs, load_ivecs,
                              save_fvecs, save_ivecs)

__version__ = "0.1.0"
