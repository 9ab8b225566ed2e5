#pragma once

#include <string>

#include <json.hpp>

#include "gfnem/config.hpp"

namespace gfnem {

// Runs one experiment to completion: writes the config copy, data copy,
// checkpoints, a metrics stream, and summary.json into cfg.out_dir.
// Returns the summary record.
nlohmann::json run_experiment(const RunConfig& cfg);

// Writes dataset files plus the ground-truth checkpoint into out_dir.
void generate_data(const RunConfig& cfg, const std::string& out_dir);

// Recomputes metrics from a finished run directory. metric_set is "auto" or
// a comma list drawn from {nll_exact, nll_iw_bound, nll_flow_bound,
// sentence_f1, per_sample_ll}.
nlohmann::json evaluate_run(const std::string& run_dir, const std::string& metric_set = "auto");

}  // namespace gfnem
