#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sure/model/model.hpp"
#include "sure/train/adamw.hpp"
#include "sure/train/synthetic.hpp"

namespace sure::train {

struct TrainConfig {
  double lr = 2e-3;
  double weight_decay = 1e-4;
  double alpha = 0.25;
  double gamma = 2.0;
  double lambda_c = 1.0;
  double lambda_f = 0.25;
  double zeta = 1.0;
  double tau = 0.1;
  std::size_t bins = 16;
  std::size_t epochs = 30;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  std::size_t image_size = 64;
  std::size_t warmup_steps = 0;
  model::FineSupervision fine_supervision = model::FineSupervision::teacher;
  bool coarse_negatives = false;
  double supervision_tau_c = 0.2;
  std::size_t neighbor_pairs = 32;  // per pair: extra fine pairs with an adjacent, wrong B cell
  std::size_t freeze_norms_after = 1;  // epochs of running-statistics warm-up

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw InvalidArgument("lr must be finite and >= 0");
    if (!(weight_decay >= 0.0)) throw InvalidArgument("weight_decay must be >= 0");
    if (!(alpha > 0.0) || !(gamma >= 0.0)) throw InvalidArgument("alpha must be > 0, gamma >= 0");
    if (!(lambda_c >= 0.0) || !(lambda_f >= 0.0)) throw InvalidArgument("loss weights must be >= 0");
    if (!(zeta >= 0.0)) throw InvalidArgument("zeta must be >= 0");
    if (!(tau > 0.0)) throw InvalidArgument("tau must be > 0");
    if (bins < 2) throw InvalidArgument("bins must be >= 2");
    if (batch_size == 0) throw InvalidArgument("batch_size must be >= 1");
    if (image_size == 0 || image_size % 8 != 0)
      throw InvalidArgument("image_size must be a positive multiple of 8");
  }

  model::LossConfig loss_config() const {
    return {alpha, gamma, lambda_c, lambda_f, zeta, fine_supervision, coarse_negatives,
            supervision_tau_c, neighbor_pairs, 0};
  }
};

struct TrainState {
  AdamWState opt;
  std::uint64_t global_step = 0;
  std::size_t epochs_done = 0;
};

struct EpochReport {
  std::size_t epoch = 0;
  double mean_total = 0.0;
  double mean_coarse = 0.0;
  double mean_fine = 0.0;  // l_fx + l_fy
  double mean_grad_norm = 0.0;
  double wall_ms = 0.0;
  std::size_t steps = 0;
  std::size_t skipped_steps = 0;

  bool same_losses(const EpochReport& o) const {
    return epoch == o.epoch && mean_total == o.mean_total && mean_coarse == o.mean_coarse &&
           mean_fine == o.mean_fine && mean_grad_norm == o.mean_grad_norm && steps == o.steps;
  }
};

/// Visiting order of the pairs in a given epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 1000 + epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

/// One pass over `data` in shuffled mini-batches. The normalization layers
/// are frozen once `freeze_norms_after` epochs have run.
template <class T>
EpochReport train_epoch(model::Model<T>& m, TrainState& st, const std::vector<SyntheticPair>& data,
                        const TrainConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  if (st.epochs_done >= cfg.freeze_norms_after) m.freeze_norms();
  auto params = m.parameters();
  const auto lc = cfg.loss_config();
  const auto order = epoch_order(data.size(), cfg.seed, st.epochs_done);

  EpochReport rep;
  rep.epoch = st.epochs_done;
  double sum_total = 0.0, sum_coarse = 0.0, sum_fine = 0.0, sum_gn = 0.0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const auto end = std::min(order.size(), start + cfg.batch_size);
    for (auto& p : params) p.clear_grad();
    Tape<T> tape;
    std::optional<Tensor<T>> batch_loss;
    double b_total = 0.0, b_coarse = 0.0, b_fine = 0.0;
    for (std::size_t k = start; k < end; ++k) {
      const auto& pair = data[order[k]];
      auto pair_lc = lc;
      pair_lc.neighbor_seed = derive_seed(pair.seed, 2000 + st.epochs_done);
      const auto parts = model::pair_loss(tape, m, pair.image_a.template to_tensor<T>(),
                                          pair.image_b.template to_tensor<T>(), pair.gt, pair_lc,
                                          true);
      const double total = parts.total.item();
      if (!std::isfinite(total)) {
        std::ostringstream os;
        os << "non-finite training loss at epoch " << st.epochs_done << ", step "
           << st.global_step << ", pair seed " << pair.seed << " (" << to_string(pair.difficulty)
           << "); batch seeds:";
        for (std::size_t q = start; q < end; ++q) os << ' ' << data[order[q]].seed;
        throw NumericError(os.str());
      }
      b_total += total;
      b_coarse += parts.coarse.item();
      if (parts.fine_x) b_fine += parts.fine_x->item();
      if (parts.fine_y) b_fine += parts.fine_y->item();
      batch_loss = batch_loss ? diff::add(tape, *batch_loss, parts.total) : parts.total;
    }
    const auto count = static_cast<T>(end - start);
    tape.backward(diff::scale(tape, *batch_loss, T(1) / count));

    double gn = 0.0;
    for (const auto& p : params)
      if (p.has_grad())
        for (T g : p.grad()) gn += static_cast<double>(g) * static_cast<double>(g);
    sum_gn += std::sqrt(gn);

    AdamWConfig oc{cfg.lr, cfg.weight_decay};
    if (cfg.warmup_steps > 0 && st.global_step < cfg.warmup_steps)
      oc.lr *= static_cast<double>(st.global_step + 1) / static_cast<double>(cfg.warmup_steps);
    if (!optimizer_step(params, st.opt, oc)) ++rep.skipped_steps;
    ++st.global_step;
    ++rep.steps;
    sum_total += b_total;
    sum_coarse += b_coarse;
    sum_fine += b_fine;
  }
  for (auto& p : params) p.clear_grad();
  const double n = data.empty() ? 1.0 : static_cast<double>(data.size());
  rep.mean_total = sum_total / n;
  rep.mean_coarse = sum_coarse / n;
  rep.mean_fine = sum_fine / n;
  rep.mean_grad_norm = rep.steps ? sum_gn / static_cast<double>(rep.steps) : 0.0;
  ++st.epochs_done;
  rep.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

/// Pairs generated from consecutive derived seeds of `base_seed`.
inline std::vector<SyntheticPair> make_dataset(std::uint64_t base_seed, std::size_t count,
                                               std::size_t size, Difficulty d,
                                               const SynthOptions& opts = {}) {
  std::vector<SyntheticPair> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k)
    out.push_back(generate_pair(derive_seed(base_seed, k), size, d, opts));
  return out;
}

}  // namespace sure::train
