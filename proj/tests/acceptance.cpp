// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// Every threshold and protocol constant is pinned below.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "avm/engine.hpp"
#include "avm/gradsuite.hpp"
#include "avm/losses.hpp"

using namespace avm;

namespace {

// 1. gradient suite
constexpr double kGradSuiteSeconds = 120.0;

// 2. loss anchors
constexpr std::size_t kConstantSimN = 8;
constexpr double kFirstBatchRelTol = 0.10;
constexpr std::size_t kFirstBatchSize = 128;

// 3. random baseline
constexpr std::size_t kBaselineN = 1622;
constexpr std::size_t kBaselineSeeds = 50;
constexpr std::size_t kBaselineDim = 128;
constexpr double kZ99 = 2.5758293035489004;
// Random column as printed, in percent, and the agreement allowed for
// two-decimal rounding of an unstated candidate count.
const std::map<std::size_t, double> kReportedRandom{{1, 0.06}, {5, 0.31}, {10, 0.61}, {50, 3.07}};
constexpr double kReportedRandomTol = 0.02;
constexpr double kReportedTop25 = 1.23;

// 4. overfit
constexpr std::size_t kOverfitSongs = 8;
constexpr std::size_t kOverfitClips = 8;
constexpr std::size_t kOverfitEpochs = 500;
constexpr double kOverfitTop1 = 0.95;
constexpr double kOverfitSeconds = 300.0;

// 5-7. ordering experiments
constexpr double kExperimentLr = 1e-3;
constexpr std::size_t kExperimentBatch = 128;
constexpr std::size_t kOrderingEpochs = 300;
const std::vector<std::uint64_t> kOrderingSeeds{0, 1, 2};
constexpr double kTivmMarginAt5 = 0.10;
constexpr double kOrderingSeconds = 30.0 * 60.0;

// 8. parameter budget
constexpr std::size_t kBudgetLow = 10'000'000, kBudgetHigh = 20'000'000;
constexpr std::size_t kTivmParams = 13'713'408, kLivmParams = 13'961'216;

// 9. determinism
constexpr std::size_t kDeterminismEpochs = 3;

int failures = 0;

void verdict(int id, bool ok, const std::string& summary) {
  std::printf("%s criterion %d: %s\n", ok ? "PASS" : "FAIL", id, summary.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

void detail(const char* fmt, auto... args) {
  std::printf("    ");
  std::printf(fmt, args...);
  std::printf("\n");
  std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Runs one criterion, turning an escaped exception into a FAIL.
void criterion(int id, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    verdict(id, false, std::string("threw: ") + e.what());
  }
}

ModelConfig desk(Preset p) { return scaled(build_preset(p), Scale::desk); }

void gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradient_suite();
  const double secs = seconds_since(t0);
  std::size_t passed = 0, composites = 0;
  double worst_prim = 0.0, worst_comp = 0.0;
  for (const auto& r : results) {
    if (r.passed()) ++passed;
    else detail("%s: error %.3g >= %.0e (%s)", r.name.c_str(), r.error, r.tolerance, r.worst.c_str());
    (r.composite ? worst_comp : worst_prim) = std::max(r.composite ? worst_comp : worst_prim, r.error);
    composites += r.composite;
  }
  const bool ok = passed == results.size() && secs < kGradSuiteSeconds;
  verdict(1, ok,
          fmt("gradient suite %zu/%zu checks (%zu composite), worst primitive %.2e < %.0e, worst composite %.2e < "
              "%.0e, %.1f s < %.0f s",
              passed, results.size(), composites, worst_prim, kPrimitiveGradTolerance, worst_comp,
              kCompositeGradTolerance, secs, kGradSuiteSeconds));
}

void loss_anchors() {
  const Tensor64 constant({kConstantSimN, kConstantSimN}, std::vector<double>(kConstantSimN * kConstantSimN, 0.37));
  const double uniform = infonce_loss(constant, 0.07, true).item();
  const bool exact = uniform == std::log(static_cast<double>(kConstantSimN));

  DatasetSplit split;
  split.train = synth_generate(SynthOptions{}).pairs;
  TrainOptions o;
  o.epochs = 1;
  o.batch_size = kFirstBatchSize;
  const double first = train(desk(Preset::ivm_m), split, o).step_losses.front();
  const double ln_b = std::log(static_cast<double>(kFirstBatchSize));
  const bool near = std::abs(first - ln_b) <= kFirstBatchRelTol * ln_b;

  // Positives at 0.9, negatives at most 0.5: every margin of 0.2 is met.
  std::vector<double> s(16, 0.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) s[i * 4 + j] = i == j ? 0.9 : 0.5 - 0.1 * static_cast<double>((i + j) % 3);
  const double triplet = triplet_loss_mined(Tensor64({4, 4}, s), 0.2, 200).item();

  verdict(2, exact && near && triplet == 0.0,
          fmt("InfoNCE(constant, N=%zu) = %.17g vs ln N = %.17g; IVM-M first batch %.4f vs ln %zu = %.4f (tol %.0f%%); "
              "satisfied triplet = %g",
              kConstantSimN, uniform, std::log(double(kConstantSimN)), first, kFirstBatchSize, ln_b,
              100 * kFirstBatchRelTol, triplet));
}

// Wilson score interval for a binomial proportion.
std::pair<double, double> wilson(double hits, double trials, double z) {
  const double p = hits / trials, z2 = z * z;
  const double centre = (p + z2 / (2 * trials)) / (1 + z2 / trials);
  const double half = z * std::sqrt(p * (1 - p) / trials + z2 / (4 * trials * trials)) / (1 + z2 / trials);
  return {centre - half, centre + half};
}

void random_anchor() {
  const std::vector<std::size_t> ks{1, 5, 10, 25, 50};
  std::vector<double> hits(ks.size(), 0.0);
  for (std::uint64_t seed = 0; seed < kBaselineSeeds; ++seed) {
    Rng rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<float> a(kBaselineN * kBaselineDim), v(kBaselineN * kBaselineDim);
    for (auto& x : a) x = normal(rng);
    for (auto& x : v) x = normal(rng);
    const auto r = evaluate_topk_recall(Tensor({kBaselineN, kBaselineDim}, a), Tensor({kBaselineN, kBaselineDim}, v),
                                        ks, Direction::video_to_audio);
    for (std::size_t i = 0; i < ks.size(); ++i) hits[i] += r.recall[i] * kBaselineN;
  }
  const double trials = static_cast<double>(kBaselineN * kBaselineSeeds);
  bool ok = true;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const double expect = random_baseline(ks[i], kBaselineN);
    const auto [lo, hi] = wilson(std::round(hits[i]), trials, kZ99);
    const bool in_ci = lo <= expect && expect <= hi;
    std::string table = "n/a";
    bool agrees = true;
    if (auto it = kReportedRandom.find(ks[i]); it != kReportedRandom.end()) {
      agrees = std::abs(100 * expect - it->second) <= kReportedRandomTol;
      table = fmt("%.2f", it->second);
    }
    detail("k=%-2zu measured %.4f%%  99%% CI [%.4f, %.4f]%%  k/N %.4f%%  reported %s%s", ks[i],
           100 * hits[i] / trials, 100 * lo, 100 * hi, 100 * expect, table.c_str(), in_ci ? "" : "  (outside CI)");
    if (ks[i] == 25) {
      detail("k=25: k/N gives %.2f%% but the reported random column reads %.2f%%; k/N is kept", 100 * expect,
             kReportedTop25);
    }
    ok = ok && in_ci && agrees;
  }
  verdict(3, ok,
          fmt("random scoring over N=%zu, %zu seeds: recall@{1,5,10,25,50} inside the 99%% CI of k/N and k/N matches "
              "the reported random column within %.2f pp",
              kBaselineN, kBaselineSeeds, kReportedRandomTol));
}

void overfit() {
  SynthOptions so;
  so.songs = kOverfitSongs;
  so.clips_per_song = kOverfitClips;
  DatasetSplit split;
  split.train = synth_generate(so).pairs;
  TrainOptions o;
  o.epochs = kOverfitEpochs;
  o.lr = kExperimentLr;
  o.batch_size = kExperimentBatch;
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train(desk(Preset::tivm), split, o);
  auto model = restore_model(result.last);
  const double top1 = evaluate_topk_recall(embed_all(model, split.train), {1}, Direction::video_to_audio).recall[0];
  const double secs = seconds_since(t0);
  verdict(4, top1 >= kOverfitTop1 && secs < kOverfitSeconds,
          fmt("TIVM on %zu order-critical pairs, %zu epochs: train top-1 %.3f >= %.2f, %.1f s < %.0f s",
              split.train.size(), kOverfitEpochs, top1, kOverfitTop1, secs, kOverfitSeconds));
}

struct Scores {
  double at5 = 0.0, at10 = 0.0;
};

void ordering_experiments() {
  const std::vector<Preset> presets{Preset::tivm, Preset::livm, Preset::ivm_m, Preset::ivm_ms, Preset::vm_ms};
  std::map<Preset, Scores> mean;
  const auto t0 = std::chrono::steady_clock::now();
  double ordering_secs = 0.0;  // the three presets criterion 5 compares
  for (auto seed : kOrderingSeeds) {
    SynthOptions so;
    so.seed = seed;
    const auto split = split_by_song(synth_generate(so).pairs, {0.8, 0.1, 0.1}, seed);
    for (auto p : presets) {
      TrainOptions o;
      o.epochs = kOrderingEpochs;
      o.lr = kExperimentLr;
      o.batch_size = kExperimentBatch;
      o.seed = seed;
      const auto t1 = std::chrono::steady_clock::now();
      auto model = restore_model(train(desk(p), split, o).best);
      const auto r = evaluate_topk_recall(embed_all(model, split.test), ks_up_to(split.test.size()),
                                          Direction::video_to_audio);
      const double run_secs = seconds_since(t1);
      if (p == Preset::tivm || p == Preset::livm || p == Preset::ivm_m) ordering_secs += run_secs;
      detail("seed %llu %-6s test N=%zu  @1 %.3f  @5 %.3f  @10 %.3f  (%.0f s)", (unsigned long long)seed,
             preset_name(p).c_str(), split.test.size(), r.at(1), r.at(5), r.at(10), run_secs);
      mean[p].at5 += r.at(5) / static_cast<double>(kOrderingSeeds.size());
      mean[p].at10 += r.at(10) / static_cast<double>(kOrderingSeeds.size());
    }
  }
  detail("all five presets: %.1f min", seconds_since(t0) / 60);
  for (auto p : presets)
    detail("mean over %zu seeds %-6s @5 %.3f  @10 %.3f", kOrderingSeeds.size(), preset_name(p).c_str(), mean[p].at5,
           mean[p].at10);

  const auto& t = mean[Preset::tivm];
  const bool c5 = t.at5 >= mean[Preset::ivm_m].at5 + kTivmMarginAt5 && t.at5 >= mean[Preset::livm].at5 &&
                  ordering_secs < kOrderingSeconds;
  verdict(5, c5,
          fmt("recall@5 TIVM %.3f >= IVM-M %.3f + %.2f and >= LIVM %.3f; %.1f min < %.0f min", t.at5,
              mean[Preset::ivm_m].at5, kTivmMarginAt5, mean[Preset::livm].at5, ordering_secs / 60, kOrderingSeconds / 60));
  verdict(6, mean[Preset::ivm_ms].at10 >= mean[Preset::vm_ms].at10,
          fmt("recall@10 IVM-MS %.3f >= VM-MS %.3f", mean[Preset::ivm_ms].at10, mean[Preset::vm_ms].at10));
  verdict(7, mean[Preset::ivm_ms].at10 >= mean[Preset::ivm_m].at10,
          fmt("recall@10 IVM-MS %.3f >= IVM-M %.3f", mean[Preset::ivm_ms].at10, mean[Preset::ivm_m].at10));
}

void parameter_budget() {
  const auto tivm = count_scalars(DualBranchModel<float>(build_preset(Preset::tivm)).parameters());
  const auto livm = count_scalars(DualBranchModel<float>(build_preset(Preset::livm)).parameters());
  auto in_budget = [](std::size_t n) { return n >= kBudgetLow && n <= kBudgetHigh; };
  verdict(8, in_budget(tivm) && in_budget(livm) && tivm == kTivmParams && livm == kLivmParams,
          fmt("TIVM %zu (pinned %zu), LIVM %zu (pinned %zu), budget [%zu, %zu]", tivm, kTivmParams, livm, kLivmParams,
              kBudgetLow, kBudgetHigh));
}

void determinism() {
  SynthOptions so;
  so.seed = 5;
  const auto split = split_by_song(synth_generate(so).pairs, {0.8, 0.1, 0.1}, 5);
  const auto dir = std::filesystem::temp_directory_path() / "avmatch_acceptance";
  std::filesystem::create_directories(dir);
  bool ok = true;
  for (auto p : {Preset::tivm, Preset::livm, Preset::vm_ms}) {
    TrainOptions o;
    o.epochs = kDeterminismEpochs;
    o.lr = kExperimentLr;
    o.seed = 5;
    const auto a = train(desk(p), split, o);
    const auto b = train(desk(p), split, o);
    const bool same_losses = !a.step_losses.empty() && a.step_losses == b.step_losses;

    const auto path = dir / (preset_cli_name(p) + ".cmck");
    save_checkpoint(a.best, path);
    auto before = restore_model(a.best);
    auto after = restore_model(load_checkpoint(path));
    const auto ks = ks_up_to(split.test.size());
    bool same_metrics = true;
    for (auto d : {Direction::video_to_audio, Direction::audio_to_video}) {
      same_metrics = same_metrics && evaluate_topk_recall(embed_all(before, split.test), ks, d).recall ==
                                         evaluate_topk_recall(embed_all(after, split.test), ks, d).recall;
    }
    const auto eb = embed_all(before, split.test), ea = embed_all(after, split.test);
    const bool same_bits = std::equal(eb.video.data().begin(), eb.video.data().end(), ea.video.data().begin()) &&
                           std::equal(eb.audio.data().begin(), eb.audio.data().end(), ea.audio.data().begin());
    detail("%-6s %zu steps: loss trajectories %s; checkpoint round trip: metrics %s, embeddings %s",
           preset_name(p).c_str(), a.step_losses.size(), same_losses ? "identical" : "DIFFER",
           same_metrics ? "identical" : "DIFFER", same_bits ? "bitwise equal" : "DIFFER");
    ok = ok && same_losses && same_metrics && same_bits;
  }
  std::filesystem::remove_all(dir);
  verdict(9, ok, "fixed-seed training reproduces loss trajectories bitwise; checkpoint round trip keeps every metric");
}

}  // namespace

int main() {
  criterion(1, gradient_suite);
  criterion(2, loss_anchors);
  criterion(3, random_anchor);
  criterion(4, overfit);
  try {
    ordering_experiments();
  } catch (const std::exception& e) {
    for (int id : {5, 6, 7}) verdict(id, false, std::string("threw: ") + e.what());
  }
  criterion(8, parameter_budget);
  criterion(9, determinism);
  std::printf("%s: %d criterion(s) failed\n", failures ? "ACCEPTANCE FAILED" : "ACCEPTANCE PASSED", failures);
  return failures ? 1 : 0;
}
