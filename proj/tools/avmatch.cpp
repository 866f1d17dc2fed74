// avmatch: synthetic data, training, evaluation and recommendation.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include "avm/engine.hpp"
#include "avm/gradsuite.hpp"

namespace fs = std::filesystem;
using namespace avm;

namespace {

Scale parse_scale(const std::string& s) {
  if (s == "full") return Scale::full;
  if (s == "desk") return Scale::desk;
  if (s == "micro") return Scale::micro;
  throw ConfigError("unknown scale '" + s + "'; use full, desk or micro");
}

std::vector<std::size_t> parse_ks(const std::string& text) {
  std::vector<std::size_t> ks;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      ks.push_back(std::stoul(item));
    } catch (const std::exception&) {
      throw ConfigError("bad k value '" + item + "' in --ks");
    }
  }
  if (ks.empty()) throw ConfigError("--ks is empty");
  return ks;
}

std::string metric_label(std::size_t k) {
  return k == 1 ? "Accuracy (Top 1)" : "Top " + std::to_string(k) + " Recall";
}

// Rows are metrics, columns the random anchor and the model, in percent.
void print_table(const RecallReport& r, const std::string& preset) {
  std::printf("%-18s %14s %10s\n", "Metric", "Random Result", preset.c_str());
  for (std::size_t i = 0; i < r.ks.size(); ++i) {
    std::printf("%-18s %14.2f %10.2f\n", metric_label(r.ks[i]).c_str(), 100.0 * r.random[i], 100.0 * r.recall[i]);
  }
  std::printf("(%zu candidates, %s)\n", r.candidates, direction_name(r.direction));
}

// Paths in `record` are relative to `from`; rewrite them relative to `to`.
ManifestRecord rebase(ManifestRecord record, const fs::path& from, const fs::path& to) {
  auto fix = [&](std::string& p) {
    fs::path path(p);
    if (path.is_relative()) path = from / path;
    p = fs::relative(fs::absolute(path), fs::absolute(to)).generic_string();
  };
  fix(record.audio_path);
  fix(record.video_path);
  return record;
}

int cmd_synth(const SynthOptions& o, const std::string& out) {
  const auto ds = synth_generate(o);
  const auto manifest = write_dataset(ds, out);
  std::printf("wrote %zu pairs from %zu songs to %s\n", ds.pairs.size(), o.songs, manifest.string().c_str());
  return 0;
}

int cmd_split(const std::string& manifest_path, const std::string& prefix, std::array<double, 3> ratios,
              std::uint64_t seed) {
  const auto records = read_manifest(manifest_path);
  const auto pairs = load_pairs(manifest_path);
  const auto split = split_by_song(pairs, ratios, seed);
  std::map<std::string, const ManifestRecord*> by_id;
  for (const auto& r : records) by_id[r.clip_id] = &r;
  const fs::path src_dir = fs::path(manifest_path).parent_path();
  const fs::path out_dir = fs::path(prefix).parent_path();
  if (!out_dir.empty()) fs::create_directories(out_dir);
  const std::pair<const char*, const std::vector<ClipPair>*> parts[] = {
      {"train", &split.train}, {"val", &split.val}, {"test", &split.test}};
  for (auto [name, list] : parts) {
    Manifest m;
    for (const auto& p : *list) m.push_back(rebase(*by_id.at(p.clip_id), src_dir, out_dir.empty() ? "." : out_dir));
    const auto path = prefix + "." + name + ".tsv";
    write_manifest(m, path);
    std::printf("%-5s %4zu pairs -> %s\n", name, m.size(), path.c_str());
  }
  return 0;
}

struct TrainArgs {
  std::string preset = "tivm";
  std::string manifest, val_manifest, out = "model.cmck", scale = "full";
  std::size_t epochs = 10, batch_size = 128;
  std::uint64_t seed = 0;
  double lr = 1e-4;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  auto cfg = scaled(build_preset(a.preset), parse_scale(a.scale));
  DatasetSplit split;
  auto pairs = load_pairs(a.manifest);
  if (!a.val_manifest.empty()) {
    split.train = std::move(pairs);
    split.val = load_pairs(a.val_manifest);
  } else {
    split = split_by_song(pairs, {0.9, 0.1, 0.0}, a.seed);
    split.train.insert(split.train.end(), split.test.begin(), split.test.end());
    split.test.clear();
  }
  if (!split.train.empty()) {
    cfg.audio_dim = split.train.front().audio.width;
    cfg.video_dim = split.train.front().video.width;
    cfg.seq_len = split.train.front().audio.frames;
  }
  TrainOptions o;
  o.epochs = a.epochs;
  o.batch_size = a.batch_size;
  o.seed = a.seed;
  o.lr = a.lr;
  o.on_epoch = [&](const EpochLog& e) {
    if (a.quiet) return;
    std::printf("epoch %4zu  loss %.6f", e.epoch, e.train_loss);
    if (e.val) std::printf("  val recall@%zu %.4f", std::min<std::size_t>(10, e.val->candidates),
                           e.val->at(std::min<std::size_t>(10, e.val->candidates)));
    std::printf("\n");
    std::fflush(stdout);
  };
  std::printf("%s: %zu train / %zu val pairs, %zu parameters\n", preset_name(cfg.preset).c_str(), split.train.size(),
              split.val.size(), count_scalars(DualBranchModel<float>(cfg).parameters()));
  const auto result = train(cfg, split, o);
  save_checkpoint(result.best, a.out);
  std::printf("saved best checkpoint to %s\n", a.out.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& manifest, const std::string& ks_text,
             const std::string& direction) {
  const auto ck = load_checkpoint(ckpt);
  auto model = restore_model(ck);
  const auto pairs = load_pairs(manifest);
  auto ks = parse_ks(ks_text);
  const auto usable = ks_up_to(pairs.size(), ks);
  if (usable.size() != ks.size()) {
    std::fprintf(stderr, "note: dropping k values above the %zu candidates\n", pairs.size());
  }
  const auto report = evaluate_topk_recall(embed_all(model, pairs), usable, parse_direction(direction));
  print_table(report, preset_name(ck.config.preset));
  std::printf("%s\n", report_json(report, preset_name(ck.config.preset), ck.config.seed).c_str());
  return 0;
}

int cmd_recommend(const std::string& ckpt, const std::string& query, const std::string& candidates,
                  std::size_t top_k) {
  auto model = restore_model(load_checkpoint(ckpt));
  const auto q = read_feature_file(query);
  std::vector<FeatureSequence> audio;
  for (auto& p : load_pairs(candidates)) audio.push_back(std::move(p.audio));
  const auto ranked = recommend(model, q, audio, top_k);
  for (std::size_t i = 0; i < ranked.size(); ++i)
    std::printf("%3zu  %-24s %.6f\n", i + 1, ranked[i].clip_id.c_str(), ranked[i].similarity);
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  int failures = 0;
  for (const auto& r : run_gradient_suite(seed)) {
    std::printf("%-4s %-32s err %.3e  tol %.0e\n", r.passed() ? "ok" : "FAIL", r.name.c_str(), r.error, r.tolerance);
    if (!r.passed()) std::printf("     worst at %s\n", r.worst.c_str());
    failures += !r.passed();
  }
  std::printf("%d failure(s)\n", failures);
  return failures ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal audio/video matching"};
  app.require_subcommand(1);

  SynthOptions synth;
  std::string synth_out = "synth";
  bool shuffled = false;
  auto* s = app.add_subcommand("synth", "Generate a synthetic paired dataset");
  s->add_option("--out", synth_out, "Output directory");
  s->add_option("--songs", synth.songs);
  s->add_option("--clips-per-song", synth.clips_per_song);
  s->add_option("--frames", synth.frames);
  s->add_option("--vocab", synth.vocab);
  s->add_option("--audio-dim", synth.audio_dim);
  s->add_option("--video-dim", synth.video_dim);
  s->add_option("--noise", synth.noise);
  s->add_option("--seed", synth.seed);
  s->add_flag("--free-order", shuffled, "Draw events independently per clip");

  std::string split_manifest, split_prefix = "split";
  std::vector<double> ratios{0.8, 0.1, 0.1};
  std::uint64_t split_seed = 0;
  auto* sp = app.add_subcommand("split", "Song-disjoint train/val/test manifests");
  sp->add_option("--manifest", split_manifest)->required();
  sp->add_option("--out-prefix", split_prefix, "Writes <prefix>.train.tsv, .val.tsv, .test.tsv");
  sp->add_option("--ratios", ratios)->delimiter(',')->expected(3);
  sp->add_option("--seed", split_seed);

  TrainArgs ta;
  auto* t = app.add_subcommand("train", "Train a preset");
  t->add_option("--preset", ta.preset)->required();
  t->add_option("--manifest", ta.manifest)->required();
  t->add_option("--val-manifest", ta.val_manifest, "Default: hold out 10% of songs from --manifest");
  t->add_option("--epochs", ta.epochs);
  t->add_option("--batch-size", ta.batch_size);
  t->add_option("--seed", ta.seed);
  t->add_option("--lr", ta.lr);
  t->add_option("--scale", ta.scale, "full, desk or micro");
  t->add_option("--out", ta.out);
  t->add_flag("--quiet", ta.quiet);

  std::string ckpt, eval_manifest, ks = "1,5,10,25,50", direction = "video->audio";
  auto* e = app.add_subcommand("eval", "Top-k recall over every pair in a manifest");
  e->add_option("--ckpt", ckpt)->required();
  e->add_option("--manifest", eval_manifest)->required();
  e->add_option("--ks", ks);
  e->add_option("--direction", direction);

  std::string query, candidates;
  std::size_t top_k = 10;
  auto* r = app.add_subcommand("recommend", "Rank audio clips for a video clip");
  r->add_option("--ckpt", ckpt)->required();
  r->add_option("--query", query, "Video CMF1 file")->required();
  r->add_option("--candidates", candidates, "Manifest of candidate clips")->required();
  r->add_option("--top-k", top_k);

  std::uint64_t grad_seed = 7;
  auto* g = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  g->add_option("--seed", grad_seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*s) {
      synth.order_critical = !shuffled;
      return cmd_synth(synth, synth_out);
    }
    if (*sp) return cmd_split(split_manifest, split_prefix, {ratios[0], ratios[1], ratios[2]}, split_seed);
    if (*t) return cmd_train(ta);
    if (*e) return cmd_eval(ckpt, eval_manifest, ks, direction);
    if (*r) return cmd_recommend(ckpt, query, candidates, top_k);
    if (*g) return cmd_gradcheck(grad_seed);
  } catch (const avm::Error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  }
  return 0;
}
