/* diffsrl - differentiable MPM state representation learning toolkit.
 *
 * C89-compatible shared-library interface: opaque handles, status codes, and
 * a thread-local textual error. All functions returning dsrl_status set the
 * last-error message on failure; handles returned through out-parameters are
 * owned by the caller and released with the matching *_close function.
 */
#ifndef DIFFSRL_H
#define DIFFSRL_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum dsrl_status {
  DSRL_OK = 0,
  DSRL_ERR_INVALID_ARGUMENT = 1,
  DSRL_ERR_IO = 2,
  DSRL_ERR_NUMERIC = 3,
  DSRL_ERR_RUNTIME = 4
} dsrl_status;

/* Message of the most recent failure on this thread. Never NULL. */
const char* dsrl_last_error(void);

typedef struct dsrl_scene dsrl_scene;
typedef struct dsrl_state dsrl_state;
typedef struct dsrl_report dsrl_report;

/* ---------- scene and simulation ---------- */

dsrl_status dsrl_scene_open(const char* config_path, dsrl_scene** out);
void dsrl_scene_close(dsrl_scene* scene);
size_t dsrl_scene_particle_count(const dsrl_scene* scene);
size_t dsrl_scene_action_dim(const dsrl_scene* scene);
size_t dsrl_scene_primitive_count(const dsrl_scene* scene);

dsrl_status dsrl_scene_initial_state(const dsrl_scene* scene, dsrl_state** out);
void dsrl_state_close(dsrl_state* state);
size_t dsrl_state_particle_count(const dsrl_state* state);
/* Copies 3*N doubles (xyz per particle). */
dsrl_status dsrl_state_positions(const dsrl_state* state, double* xyz, size_t capacity);

/* One control step (all configured substeps); action is 3 components per
 * actuated primitive, clamped to the configured bounds. */
dsrl_status dsrl_step(const dsrl_scene* scene, const dsrl_state* state,
                      const double* action, size_t action_len, dsrl_state** out);

/* ---------- geometry and metrics ---------- */

/* Signed distance and unit gradient of one scene primitive at a point. */
dsrl_status dsrl_sdf_eval(const dsrl_scene* scene, size_t primitive_index,
                          const double* point3, double* distance, double* gradient3);

/* Chamfer distance between two xyz clouds (squared-distance convention). */
dsrl_status dsrl_chamfer(const double* a_xyz, size_t a_count, const double* b_xyz,
                         size_t b_count, double* out);

/* One-to-one matching between equal-size clouds; perm[i] = index into b
 * matched with a[i]. max_iters <= 0 selects the default budget. */
dsrl_status dsrl_emd_match(const double* a_xyz, const double* b_xyz, size_t count,
                           int max_iters, uint32_t* perm, double* cost);

/* ---------- pipeline commands (the CLI surface) ---------- */

dsrl_status dsrl_gen_data(const char* scene_cfg, const char* run_cfg,
                          const char* out_dir);

/* ablate_override: -1 keep config value, 0 force off, 1 force on.
 * report_out may be NULL when the caller only wants the checkpoint. */
dsrl_status dsrl_train(const char* scene_cfg, const char* run_cfg,
                       const char* data_dir, const char* ckpt_out, int resume,
                       int ablate_override, dsrl_report** report_out);

/* kind: "autoencoder" | "forward" | "inverse". */
dsrl_status dsrl_train_baseline(const char* kind, const char* scene_cfg,
                                const char* run_cfg, const char* data_dir,
                                const char* ckpt_out, dsrl_report** report_out);

/* k <= 0 selects the config value. */
dsrl_status dsrl_eval_traj(const char* scene_cfg, const char* run_cfg,
                           const char* data_dir, const char* ckpt,
                           int k, dsrl_report** report_out);

dsrl_status dsrl_eval_reward(const char* scene_cfg, const char* run_cfg,
                             const char* data_dir, const char* ckpt,
                             dsrl_report** report_out);

dsrl_status dsrl_mbpo(const char* scene_cfg, const char* run_cfg, const char* ckpt,
                      dsrl_report** report_out);

dsrl_status dsrl_robustness(const char* scene_cfg, const char* run_cfg,
                            const char* ckpt, const size_t* counts,
                            size_t n_counts, dsrl_report** report_out);

/* Rollout gradients versus central finite differences on the configured
 * scene; writes the max relative error. */
dsrl_status dsrl_grad_check(const char* scene_cfg, double* max_rel_err);

/* ---------- reports ---------- */

size_t dsrl_report_count(const dsrl_report* report);
dsrl_status dsrl_report_name(const dsrl_report* report, size_t index, char* buf,
                             size_t capacity);
dsrl_status dsrl_report_stats(const dsrl_report* report, size_t index, double* mean,
                              double* std_dev, size_t* n);
dsrl_status dsrl_report_values(const dsrl_report* report, size_t index, double* buf,
                               size_t capacity);
dsrl_status dsrl_report_write_csv(const dsrl_report* report, size_t index,
                                  const char* path);
dsrl_status dsrl_report_write_json(const dsrl_report* report, const char* command,
                                   const char* path);
void dsrl_report_close(dsrl_report* report);

#ifdef __cplusplus
}
#endif

#endif /* DIFFSRL_H */
