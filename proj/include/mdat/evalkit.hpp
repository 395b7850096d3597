#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mdat/trainer.hpp"

namespace mdat {

// Accuracies are pooled over all queries of all episodes. eps_list is kept
// sorted ascending; acc_adv[i] pairs with eps_list[i].
struct EvalReport {
  std::string method;
  int n_episodes = 0;
  double acc_clean = 0.0;
  std::vector<double> eps_list;
  std::vector<double> acc_adv;
  std::vector<double> beta_list;
};

// Weighted harmonic mean of clean and adversarial accuracy; beta = 0 weights
// clean only, beta -> infinity weights adversarial only. Scale-covariant, so
// fractions and percentage points both work. Defined as 0 when the
// denominator vanishes (notably both accuracies zero).
double f_beta(double acc_clean, double acc_adv, double beta);

std::vector<std::pair<double, double>> f_beta_curve(double acc_clean, double acc_adv,
                                                    double beta_min, double beta_max,
                                                    double step);

// Runs n_episodes test episodes with the checkpoint's episode shape (the way
// is capped at the test split's class count). attack_kind "" follows the
// checkpoint's training attack. eps = 0 entries reuse the clean predictions.
EvalReport evaluate(const Checkpoint& ck, const Dataset& ds, std::vector<double> eps_list,
                    const std::string& attack_kind, int n_episodes,
                    std::vector<double> beta_list, std::uint64_t seed);

// Schema: header `method,epsilon,acc_clean,acc_adv,f_beta,beta`, one clean
// row with epsilon 0, then one row per (eps, beta) with eps ascending. With
// an empty beta list the f_beta and beta fields are left blank.
void write_report(const EvalReport& report, const std::string& path);
EvalReport parse_report(const std::string& path);

// Schema: header `beta,f_beta`, one row per point.
void write_curve(const std::vector<std::pair<double, double>>& curve, const std::string& path);

}  // namespace mdat
