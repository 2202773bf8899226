#pragma once

#include <string>
#include <vector>

#include "mavt/config.hpp"

namespace mavt {

struct AblationRow {
  std::string name;
  double fg_acc = 0.0, bg_acc = 0.0, retrieval_r1 = 0.0;  // seed means
  std::vector<double> fg_seeds;
};

struct AblationReport {
  std::string suite;
  std::vector<AblationRow> rows;
  std::string csv;     // suite,name,seeds,fg_acc,bg_acc,retrieval_r1
  std::string report;  // trend lines, one verdict each
  bool pass = false;
};

// Compressed geometry and budget for suite runs: every configuration inside
// a suite shares it, only the suite's own keys and the seed vary. Data and
// schedule keys the caller already changed from their defaults are honored.
// Naming a suite layers that suite's budget on top (fg_mining needs a wider
// model and longer schedule before background detection moves at all).
RunConfig ablation_defaults(const RunConfig& base,
                            const std::string& suite = "");

// Suites: tokens (prompt sets {a,s,av,avs} x LSA), blockwise (contrastive
// none / final / blockwise), fg_mining (mismatch ratio 0 vs base), unimodal
// (paired vs single-stream training, cross-evaluated per modality).
AblationReport run_ablation(const std::string& suite, const RunConfig& base,
                            int seeds = 3);

}  // namespace mavt
