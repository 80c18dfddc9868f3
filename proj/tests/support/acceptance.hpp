#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "mrir/config.hpp"

namespace mrir::acceptance {

struct CriterionResult {
  std::string id;
  std::string title;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct Options {
  std::string mrir_exe;  // CLI used by A7
  std::string work_dir;  // scratch space
  bool quick = false;    // skip the toy overfit run (A6)
};

// Architecture used by the toy overfit run: the micro config with a first scale wide
// enough to carry the 192-channel latent, trained at a lower learning rate.
Config toy_overfit_config();

CriterionResult a1_gradients();
CriterionResult a2_dft_oracle();
CriterionResult a3_zero_init_inertness();
CriterionResult a4_freeze_policy();
CriterionResult a5_cfg_identities();
CriterionResult a6_toy_overfit(std::ostream* progress = nullptr);
CriterionResult a7_cli_determinism(const Options& opts);
CriterionResult a8_degradation();
CriterionResult a9_chunked_prompts();
CriterionResult a10_metric_oracles();
CriterionResult a11_loss_composition();

// Runs every criterion in order, printing one "A<n> PASS|FAIL ..." line each as it
// finishes. Returns true when all pass (A6 counts as passed when skipped by `quick`).
bool run_all(const Options& opts, std::ostream& out);

}  // namespace mrir::acceptance
