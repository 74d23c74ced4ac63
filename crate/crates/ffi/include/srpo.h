#ifndef SRPO_H
#define SRPO_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define SRPO_ALGORITHM_GRPO 0

#define SRPO_ALGORITHM_SDPO 1

#define SRPO_ALGORITHM_SRPO 2

#define SRPO_ALGORITHM_SRPO_NO_DW 3

#define SRPO_ALGORITHM_ADV_MIX 4

#define SRPO_DIVERGENCE_FKL 0

#define SRPO_DIVERGENCE_RKL 1

#define SRPO_DIVERGENCE_JS 2

#define SRPO_BRANCH_GRPO 0

#define SRPO_BRANCH_SDPO 1

typedef enum SrpoStatus {
  SRPO_STATUS_OK = 0,
  SRPO_STATUS_NULL_POINTER = 1,
  SRPO_STATUS_INVALID_UTF8 = 2,
  SRPO_STATUS_CONFIG = 3,
  SRPO_STATUS_INVALID_INPUT = 4,
  SRPO_STATUS_NON_FINITE = 5,
  SRPO_STATUS_INFINITE_DIVERGENCE = 6,
  SRPO_STATUS_MODEL = 7,
  SRPO_STATUS_IO = 8,
  SRPO_STATUS_SCHEMA = 9,
  SRPO_STATUS_JSON = 10,
  SRPO_STATUS_BUFFER_TOO_SMALL = 11,
  SRPO_STATUS_PANIC = 12,
} SrpoStatus;

// Opaque training configuration.
typedef struct SrpoConfig SrpoConfig;

// Opaque trainer: student, EMA teacher, optimizer moments and step counter.
typedef struct SrpoTrainer SrpoTrainer;

// One training step's metrics. Missing values are NaN.
typedef struct SrpoStepMetrics {
  uint64_t step;
  double wall_seconds;
  double mean_loss;
  double grpo_frac;
  double sdpo_frac;
  double teacher_avail_frac;
  double mean_teacher_entropy;
  double mean_response_length;
  double train_accuracy;
  double eval_avg_at_k;
  double grad_norm;
  uint64_t dropped_token_count;
} SrpoStepMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL-terminated,
// truncated to fit). Returns the full length including the NUL, or 0 if the
// last call succeeded.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t srpo_last_error_message(char *buf, size_t len);

// Desk-scale preset for the given `SRPO_ALGORITHM_*` code.
//
// # Safety
// `out` must be a valid pointer to write the handle to.
enum SrpoStatus srpo_config_desk(int32_t algorithm_code, struct SrpoConfig **out);

// The published hyperparameters on the desk-scale model.
//
// # Safety
// `out` must be a valid pointer to write the handle to.
enum SrpoStatus srpo_config_paper(int32_t algorithm_code, struct SrpoConfig **out);

// Parses and validates a JSON config.
//
// # Safety
// `json` must be a NUL-terminated string; `out` a valid pointer.
enum SrpoStatus srpo_config_from_json(const char *json, struct SrpoConfig **out);

// Applies one `key=value` override (dotted keys reach nested sections).
// The config is left unchanged if the result does not validate.
//
// # Safety
// `config` must be a live handle; `assignment` a NUL-terminated string.
enum SrpoStatus srpo_config_set(struct SrpoConfig *config, const char *assignment);

// Writes the config as pretty JSON. With a null or short buffer, returns
// `BufferTooSmall` and stores the required size in `*needed`.
//
// # Safety
// `config` must be a live handle; `buf` null or valid for `len` bytes;
// `needed` null or valid.
enum SrpoStatus srpo_config_to_json(const struct SrpoConfig *config,
                                    char *buf,
                                    size_t len,
                                    size_t *needed);

// # Safety
// `config` must be null or a handle not yet freed.
void srpo_config_free(struct SrpoConfig *config);

// Initializes a trainer: random parameters followed by the supervised warm start.
//
// # Safety
// `config` must be a live handle; `out` a valid pointer.
enum SrpoStatus srpo_trainer_new(const struct SrpoConfig *config, struct SrpoTrainer **out);

// Restores a trainer saved with `srpo_trainer_save` or by a training run.
//
// # Safety
// `dir` must be a NUL-terminated path; `out` a valid pointer.
enum SrpoStatus srpo_trainer_load(const char *dir, struct SrpoTrainer **out);

// Collects rollouts, performs one outer step and evaluates if scheduled.
//
// # Safety
// `trainer` must be a live handle; `metrics` null or valid.
enum SrpoStatus srpo_trainer_step(struct SrpoTrainer *trainer, struct SrpoStepMetrics *metrics);

// avg@k of the student on the run's evaluation prompts.
//
// # Safety
// `trainer` must be a live handle; `avg_at_k` valid.
enum SrpoStatus srpo_trainer_evaluate(const struct SrpoTrainer *trainer, double *avg_at_k);

// Writes checkpoint, optimizer and trainer-state files into `dir`.
//
// # Safety
// `trainer` must be a live handle; `dir` a NUL-terminated path.
enum SrpoStatus srpo_trainer_save(const struct SrpoTrainer *trainer, const char *dir);

// Outer steps completed, or 0 for a null handle.
//
// # Safety
// `trainer` must be null or a live handle.
uint64_t srpo_trainer_step_count(const struct SrpoTrainer *trainer);

// Number of scalar parameters in the student, or 0 for a null handle.
//
// # Safety
// `trainer` must be null or a live handle.
uint64_t srpo_trainer_num_params(const struct SrpoTrainer *trainer);

// # Safety
// `trainer` must be null or a handle not yet freed.
void srpo_trainer_free(struct SrpoTrainer *trainer);

// Full training run into `out_dir`, as the `train` command does.
//
// # Safety
// `config` must be a live handle; `out_dir` a NUL-terminated path.
enum SrpoStatus srpo_run_training(const struct SrpoConfig *config,
                                  const char *out_dir,
                                  bool resume);

// Group-relative advantages of `n` rewards into `out[n]`.
//
// # Safety
// `rewards` and `out` must be valid for `n` doubles.
enum SrpoStatus srpo_group_advantages(const double *rewards, size_t n, double adv_eps, double *out);

double srpo_grpo_token_loss(double logprob_new,
                            double logprob_old,
                            double advantage,
                            double eps_low,
                            double eps_high);

double srpo_is_weight(double logprob_current, double logprob_behavior, double rho);

// Divergence between student and teacher probabilities that already share a support.
//
// # Safety
// `student` and `teacher` must be valid for `n` doubles; `out` valid.
enum SrpoStatus srpo_divergence(int32_t kind,
                                const double *student,
                                const double *teacher,
                                size_t n,
                                double *out);

// Shannon entropy in nats; NaN for a null pointer with `n > 0`.
//
// # Safety
// `probs` must be valid for `n` doubles.
double srpo_teacher_entropy(const double *probs, size_t n);

// Entropy-based token weights with unit mean, written to `out[n]`.
//
// # Safety
// `entropies` and `out` must be valid for `n` doubles.
enum SrpoStatus srpo_dynamic_weights(const double *entropies, size_t n, double beta, double *out);

// `SRPO_BRANCH_SDPO` for an incorrect rollout with a teacher, else `SRPO_BRANCH_GRPO`.
int32_t srpo_route_rollout(bool correct, bool teacher_available);

double srpo_lr_schedule(double base_lr, size_t warmup_steps, uint64_t update);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SRPO_H */
