"""Multi-fidelity operator learning for real-time tunnel settlement advice.

A low-fidelity operator net learns the pressure-history -> surface-settlement
map from a synthetic ground model offline; during a drive, a small residual
net retrains against live sensor readings in seconds and corrects the
low-fidelity field everywhere on the monitoring grid.
"""
from .causal import (HfSpec, LowfiData, NormStats, TripletDataset,
                     assemble_hifi, assemble_lowfi, calibrate_noise,
                     causal_embed, fit_norm, l2_error, load_lowfi_cache,
                     save_lowfi_cache, split_scenario_ids, synthesize_hifi)
from .errors import (CorruptCheckpointError, DegenerateRangeError,
                     NumericError, TrainingFailure, UndefinedMetricError)
from .ground import (GroundModel, RawDataset, Scenario, ScenarioSpec,
                     SurfaceGrid, calibrate_gain, gen_lowfi_dataset,
                     gen_scenario, load_raw, make_grid, reference_scenario,
                     sensor_layout, settlement, settlement_field,
                     write_raw_csv)
from .numkit import (AdamState, LrSchedule, RngStream, adam_init, adam_step,
                     glorot_normal, lr_at, matmul, tanh_act, tanh_grad)
from .opnet import (Checkpoint, NetConfig, NetParams, forward, forward_batch,
                    grad_check, init_params, load_checkpoint, loss_and_grads,
                    save_checkpoint)
from .presets import PRESETS, RunConfig, desk, paper_scale, study
from .studies import (StudyReport, build_study_context, parse_report, r2,
                      run_error_level_study, run_error_type_study,
                      run_min_data_study, write_report)
from .training import (CompositeModel, FieldPrediction, TrainConfig,
                       TrainHistory, composite_loss, lf_predict,
                       lf_predict_batch, load_composite, predict_composite,
                       predict_composite_batch, predict_field,
                       save_composite, train_lowfi, train_residual,
                       zero_residual_model)

__version__ = "0.1.0"
