#include "avm/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "avm/ops.hpp"

namespace avm {

namespace fs = std::filesystem;

const char* modality_name(Modality m) { return m == Modality::audio ? "audio" : "video"; }

Tensor FeatureSequence::to_tensor() const { return Tensor({frames, width}, values); }

namespace {

constexpr char kMagic[4] = {'C', 'M', 'F', '1'};
constexpr std::uint16_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 4 + 2 + 1 + 4 + 4;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    auto tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return fields;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Number of distinct orderings of a multiset, saturating at `cap`.
std::size_t distinct_permutations(const std::vector<std::size_t>& counts, std::size_t cap) {
  long double perms = 1.0L;
  std::size_t placed = 0;
  for (auto c : counts) {
    for (std::size_t i = 1; i <= c; ++i) {
      ++placed;
      perms = perms * static_cast<long double>(placed) / static_cast<long double>(i);
    }
    if (perms >= static_cast<long double>(cap)) return cap;
  }
  return static_cast<std::size_t>(std::llround(perms));
}

}  // namespace

void write_feature_file(const FeatureSequence& seq, const fs::path& path) {
  if (seq.frames == 0 || seq.width == 0 || seq.values.size() != seq.frames * seq.width) {
    throw ShapeError("feature sequence '" + seq.clip_id + "' has " + std::to_string(seq.values.size()) +
                     " values for shape (" + std::to_string(seq.frames) + ", " + std::to_string(seq.width) + ")");
  }
  std::string out(kMagic, 4);
  put_u16(out, kVersion);
  out.push_back(static_cast<char>(seq.modality));
  put_u32(out, static_cast<std::uint32_t>(seq.frames));
  put_u32(out, static_cast<std::uint32_t>(seq.width));
  out.reserve(out.size() + 4 * seq.values.size());
  for (float v : seq.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw FormatError("cannot write " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
}

FeatureSequence read_feature_file(const fs::path& path, std::string clip_id) {
  const std::string bytes = read_all(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.data())) {
    throw FormatError(path.string() + ": not a CMF1 feature file (bad magic)");
  }
  if (bytes.size() < kHeaderBytes) {
    throw CorruptionError(path.string() + ": truncated header, expected " + std::to_string(kHeaderBytes) +
                          " bytes, got " + std::to_string(bytes.size()));
  }
  const std::uint16_t version = static_cast<std::uint16_t>(p[4] | (p[5] << 8));
  if (version != kVersion) {
    throw FormatError(path.string() + ": unsupported CMF version " + std::to_string(version));
  }
  if (p[6] > 1) throw FormatError(path.string() + ": unknown modality code " + std::to_string(p[6]));
  FeatureSequence seq;
  seq.clip_id = clip_id.empty() ? path.stem().string() : std::move(clip_id);
  seq.modality = static_cast<Modality>(p[6]);
  seq.frames = get_u32(p + 7);
  seq.width = get_u32(p + 11);
  if (seq.frames == 0 || seq.width == 0) throw FormatError(path.string() + ": zero-sized feature matrix");
  const std::size_t expected = 4 * seq.frames * seq.width;
  const std::size_t actual = bytes.size() - kHeaderBytes;
  if (actual != expected) {
    throw CorruptionError(path.string() + ": expected " + std::to_string(expected) + " payload bytes, got " +
                          std::to_string(actual));
  }
  seq.values.resize(seq.frames * seq.width);
  for (std::size_t i = 0; i < seq.values.size(); ++i)
    seq.values[i] = std::bit_cast<float>(get_u32(p + kHeaderBytes + 4 * i));
  return seq;
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  Manifest manifest;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto fields = split_tabs(line);
    if (fields.size() != 4) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 4 tab-separated fields, got " +
                        std::to_string(fields.size()));
    }
    manifest.push_back({fields[0], fields[1], fields[2], fields[3]});
  }
  return manifest;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write manifest " + path.string());
  out << "# clip_id\tsong_id\taudio_path\tvideo_path\n";
  for (const auto& r : manifest) out << r.clip_id << '\t' << r.song_id << '\t' << r.audio_path << '\t' << r.video_path << '\n';
}

void validate_manifest(const Manifest& manifest, const fs::path& base_dir) {
  std::set<std::string> seen;
  for (const auto& r : manifest) {
    if (!seen.insert(r.clip_id).second) throw ConfigError("manifest lists clip id '" + r.clip_id + "' twice");
    for (const auto& p : {r.audio_path, r.video_path}) {
      if (!fs::exists(resolve(base_dir, p))) {
        throw ConfigError("manifest record '" + r.clip_id + "' points to missing file " + p);
      }
    }
  }
}

std::vector<ClipPair> load_pairs(const fs::path& manifest_path) {
  const auto manifest = read_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  validate_manifest(manifest, base);
  std::vector<ClipPair> pairs;
  pairs.reserve(manifest.size());
  for (const auto& r : manifest) {
    ClipPair pair{r.clip_id, r.song_id, read_feature_file(resolve(base, r.audio_path), r.clip_id),
                  read_feature_file(resolve(base, r.video_path), r.clip_id)};
    if (pair.audio.modality != Modality::audio || pair.video.modality != Modality::video) {
      throw FormatError("clip '" + r.clip_id + "': feature files carry the wrong modality tag");
    }
    if (pair.audio.frames != pair.video.frames) {
      throw ShapeError("clip '" + r.clip_id + "': audio has " + std::to_string(pair.audio.frames) +
                       " frames, video has " + std::to_string(pair.video.frames));
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

DatasetSplit split_by_song(const std::vector<ClipPair>& pairs, std::array<double, 3> ratios, std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> by_song;
  for (std::size_t i = 0; i < pairs.size(); ++i) by_song[pairs[i].song_id].push_back(i);
  if (by_song.size() < 3) {
    throw ConfigError("song-disjoint splitting needs at least 3 distinct songs, got " + std::to_string(by_song.size()));
  }
  double ratio_sum = 0.0;
  for (double r : ratios) {
    if (r < 0) throw ConfigError("split ratios must be nonnegative");
    ratio_sum += r;
  }
  if (ratio_sum <= 0) throw ConfigError("split ratios must not all be zero");

  std::vector<std::string> songs;
  for (const auto& [song, _] : by_song) songs.push_back(song);
  Rng rng(seed);
  std::shuffle(songs.begin(), songs.end(), rng);

  std::array<double, 3> target{};
  for (int s = 0; s < 3; ++s) target[s] = ratios[s] / ratio_sum * static_cast<double>(pairs.size());
  std::array<double, 3> filled{};
  std::array<std::size_t, 3> song_count{};
  DatasetSplit split;
  split.ratios = ratios;
  std::array<std::vector<ClipPair>*, 3> out{&split.train, &split.val, &split.test};

  for (std::size_t k = 0; k < songs.size(); ++k) {
    const std::size_t remaining = songs.size() - k;
    std::size_t starving = 0;
    for (int s = 0; s < 3; ++s)
      if (ratios[s] > 0 && song_count[s] == 0) ++starving;
    int pick = -1;
    double best = -std::numeric_limits<double>::infinity();
    for (int s = 0; s < 3; ++s) {
      if (ratios[s] <= 0) continue;
      // Keep at least one song for every split with a nonzero ratio.
      if (remaining <= starving && song_count[s] > 0) continue;
      const double deficit = target[s] - filled[s];
      if (deficit > best) {
        best = deficit;
        pick = s;
      }
    }
    const auto& members = by_song[songs[k]];
    for (auto i : members) out[pick]->push_back(pairs[i]);
    filled[pick] += static_cast<double>(members.size());
    ++song_count[pick];
  }
  return split;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<ClipPair>& pairs, std::size_t batch_size,
                                                   std::uint64_t seed, bool drop_last) {
  if (batch_size < 2) {
    throw ConfigError("batch size must be at least 2 for in-batch negatives, got " + std::to_string(batch_size));
  }
  std::set<std::string> ids;
  for (const auto& p : pairs)
    if (!ids.insert(p.clip_id).second) throw ConfigError("duplicate clip id '" + p.clip_id + "' in batch source");
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    if (drop_last && end - start < batch_size) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

SynthDataset synth_generate(const SynthOptions& o) {
  if (o.vocab < 2) throw ConfigError("synthetic vocabulary needs at least 2 events");
  if (o.frames < 2) throw ConfigError("synthetic clips need at least 2 frames");
  if (o.songs == 0 || o.clips_per_song == 0 || o.audio_dim == 0 || o.video_dim == 0) {
    throw ConfigError("synthetic dataset sizes must be positive");
  }
  if (o.order_critical) {
    // Most permutable multiset: counts as even as possible.
    std::vector<std::size_t> even(o.vocab, o.frames / o.vocab);
    for (std::size_t v = 0; v < o.frames % o.vocab; ++v) ++even[v];
    if (distinct_permutations(even, o.clips_per_song) < o.clips_per_song) {
      throw ConfigError("cannot draw " + std::to_string(o.clips_per_song) + " distinct orderings of " +
                        std::to_string(o.frames) + " events over a vocabulary of " + std::to_string(o.vocab));
    }
  }

  Rng rng(o.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  SynthDataset ds;
  ds.audio_mixing.resize(o.audio_dim * o.vocab);
  ds.video_mixing.resize(o.video_dim * o.vocab);
  for (auto& w : ds.audio_mixing) w = static_cast<float>(normal(rng));
  for (auto& w : ds.video_mixing) w = static_cast<float>(normal(rng));

  auto draw_event = [&] { return std::min(o.vocab - 1, static_cast<std::size_t>(uniform01(rng) * o.vocab)); };

  auto render = [&](const std::vector<std::size_t>& events, const std::vector<float>& mixing, std::size_t dim,
                    Modality m, const std::string& clip) {
    FeatureSequence seq{clip, m, o.frames, dim, std::vector<float>(o.frames * dim)};
    for (std::size_t t = 0; t < o.frames; ++t)
      for (std::size_t r = 0; r < dim; ++r)
        seq.values[t * dim + r] =
            static_cast<float>(mixing[r * o.vocab + events[t]] + o.noise * normal(rng));
    return seq;
  };

  for (std::size_t s = 0; s < o.songs; ++s) {
    char song_buf[32];
    std::snprintf(song_buf, sizeof song_buf, "song%04zu", s);
    const std::string song = song_buf;

    std::vector<std::vector<std::size_t>> clips;
    if (o.order_critical) {
      std::vector<std::size_t> multiset(o.frames);
      while (true) {
        for (auto& e : multiset) e = draw_event();
        std::vector<std::size_t> counts(o.vocab, 0);
        for (auto e : multiset) ++counts[e];
        if (distinct_permutations(counts, o.clips_per_song) >= o.clips_per_song) break;
      }
      std::set<std::vector<std::size_t>> used;
      while (clips.size() < o.clips_per_song) {
        std::shuffle(multiset.begin(), multiset.end(), rng);
        if (used.insert(multiset).second) clips.push_back(multiset);
      }
    } else {
      for (std::size_t c = 0; c < o.clips_per_song; ++c) {
        std::vector<std::size_t> events(o.frames);
        for (auto& e : events) e = draw_event();
        clips.push_back(std::move(events));
      }
    }

    for (std::size_t c = 0; c < clips.size(); ++c) {
      char clip_buf[48];
      std::snprintf(clip_buf, sizeof clip_buf, "%s_clip%02zu", song.c_str(), c);
      const std::string clip = clip_buf;
      ClipPair pair{clip, song, render(clips[c], ds.audio_mixing, o.audio_dim, Modality::audio, clip),
                    render(clips[c], ds.video_mixing, o.video_dim, Modality::video, clip)};
      ds.pairs.push_back(std::move(pair));
      ds.events.push_back(clips[c]);
      ds.manifest.push_back({clip, song, "audio/" + clip + ".cmf", "video/" + clip + ".cmf"});
    }
  }
  return ds;
}

fs::path write_dataset(const SynthDataset& dataset, const fs::path& dir) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < dataset.pairs.size(); ++i) {
    write_feature_file(dataset.pairs[i].audio, dir / dataset.manifest[i].audio_path);
    write_feature_file(dataset.pairs[i].video, dir / dataset.manifest[i].video_path);
  }
  const auto manifest_path = dir / "manifest.tsv";
  write_manifest(dataset.manifest, manifest_path);
  return manifest_path;
}

}  // namespace avm
