"""privdiff: differentially private diffusion models by adversarial distillation.

A desk-scale library and CLI. A guidance teacher is trained on private data
without protection, then a student is distilled from it under differential
privacy: each update clips the per-example loss gradient at the student's
output, backpropagates the clipped adjoint, and injects Gaussian noise once,
with the budget tracked by a closed-form Renyi accountant. A small
discriminator on (teacher, student) output pairs supplies the adversarial
term.
"""

__version__ = "0.1.0"

from .autodiff import Var, backward, backward_from, grad_wrt
from .data import LabeledDataset, make_eight_gaussians, read_dataset, write_dataset
from .diffusion import (Denoiser, GuidanceConfig, NoiseSchedule, build_schedule,
                        cfg_noise, cfg_predict, ddpm_loss, forward_closed_form,
                        forward_step, noise_to_prev_mean, predict_next,
                        prev_mean_to_noise, sample_reverse, time_embedding)
from .metrics import (ConvergenceTrace, MetricReport, classifier_accuracy,
                      convergence_check, make_metric_report, median_bandwidth, mmd)
from .nn import (MLPArch, OptState, ParamSet, PerExampleGrads, backprop_through,
                 cosine_lr, forward_mlp, grad_wrt_intermediate,
                 per_example_gradients, sgd_step, xavier_init)
from .privacy import (ORDER_GRID, PrivacyInfeasibleError, PrivacyParams,
                      PrivacySpend, RDPPoint, calibrate_sigma, clip, compose_rdp,
                      gaussian_perturb, l2_sensitivity, rdp_gaussian, rdp_to_dp,
                      sanitize_per_example, total_epsilon)
from .training import (BudgetExceededError, Discriminator, ModelTriple,
                       StepOutputs, StudentState, TrainingFailureError, TrainPlan,
                       ablation_suite, adv_loss_discriminator, adv_loss_student,
                       combined_loss, dis_loss, discriminator_accuracy,
                       discriminator_update, init_student_state, pseudo_label,
                       sample_labeled, sanitized_student_update,
                       stochastic_step_grads, train_student, train_teacher)
