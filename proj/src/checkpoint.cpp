#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <json.hpp>
#include <map>

#include "avm/engine.hpp"

namespace avm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'C', 'M', 'C', 'K'};
const std::string kMomentM = "adam.m.";
const std::string kMomentV = "adam.v.";

template <typename T>
void put(std::string& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.append(bytes, sizeof(T));
}

void put_tensor(std::string& out, const std::string& name, const Tensor& t) {
  if (name.size() > 0xFFFF) throw ConfigError("tensor name too long: " + name.substr(0, 40) + "...");
  put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  out.append(reinterpret_cast<const char*>(t.data().data()), t.numel() * sizeof(float));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    T value;
    std::memcpy(&value, take(sizeof(T), what), sizeof(T));
    return value;
  }
  const char* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CorruptionError(std::string("checkpoint truncated reading ") + what + ": needed " + std::to_string(n) +
                            " bytes at offset " + std::to_string(pos_) + ", file has " +
                            std::to_string(bytes_.size()));
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Checkpoint make_checkpoint(const DualBranchModel<float>& model, const TrainerState* trainer) {
  Checkpoint ck;
  ck.config = model.config();
  for (const auto& p : model.parameters()) ck.tensors.push_back({p.name, p.tensor.clone().detach()});
  for (const auto& b : model.buffers()) ck.tensors.push_back({b.name, b.tensor.clone().detach()});
  if (trainer) {
    TrainerState copy = *trainer;
    for (auto* list : {&copy.m, &copy.v})
      for (auto& t : *list) t.tensor = t.tensor.clone().detach();
    ck.trainer = std::move(copy);
  }
  return ck;
}

DualBranchModel<float> restore_model(const Checkpoint& ck) {
  DualBranchModel<float> model(ck.config);
  auto targets = model.parameters();
  for (const auto& b : model.buffers()) targets.push_back(b);
  if (targets.size() != ck.tensors.size()) {
    throw CorruptionError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, the " +
                          preset_name(ck.config.preset) + " model expects " + std::to_string(targets.size()));
  }
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : ck.tensors) by_name[t.name] = &t.tensor;
  for (auto& target : targets) {
    const auto it = by_name.find(target.name);
    if (it == by_name.end()) throw CorruptionError("checkpoint is missing tensor '" + target.name + "'");
    if (it->second->shape() != target.tensor.shape()) {
      throw CorruptionError("tensor '" + target.name + "' has shape " + shape_str(it->second->shape()) +
                            ", expected " + shape_str(target.tensor.shape()));
    }
    const auto src = it->second->data();
    std::copy(src.begin(), src.end(), target.tensor.mutable_data().begin());
  }
  return model;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  nlohmann::json blob;
  blob["model"] = nlohmann::json::parse(config_to_json(ck.config));
  std::size_t count = ck.tensors.size();
  if (ck.trainer) {
    const auto& t = *ck.trainer;
    blob["trainer"] = {{"step", t.step},   {"epoch", t.epoch},         {"lr", t.lr},
                       {"beta1", t.beta1}, {"beta2", t.beta2},         {"eps", t.eps},
                       {"rng", t.rng_state}, {"best_val_recall", t.best_val_recall}};
    count += t.m.size() + t.v.size();
  }
  const std::string config = blob.dump();

  std::string out(kMagic, 4);
  put<std::uint16_t>(out, Checkpoint::kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(config.size()));
  out += config;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(count));
  for (const auto& t : ck.tensors) put_tensor(out, t.name, t.tensor);
  if (ck.trainer) {
    for (const auto& t : ck.trainer->m) put_tensor(out, kMomentM + t.name, t.tensor);
    for (const auto& t : ck.trainer->v) put_tensor(out, kMomentV + t.name, t.tensor);
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open '" + path.string() + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw ConfigError("failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open checkpoint '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(bytes);

  if (std::memcmp(r.take(4, "magic"), kMagic, 4) != 0) throw FormatError("'" + path.string() + "' is not a checkpoint");
  const auto version = r.get<std::uint16_t>("version");
  if (version != Checkpoint::kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(Checkpoint::kVersion) + ")");
  }
  const auto config_len = r.get<std::uint32_t>("config length");
  const std::string config(r.take(config_len, "config"), config_len);

  Checkpoint ck;
  nlohmann::json blob;
  try {
    blob = nlohmann::json::parse(config);
    ck.config = config_from_json(blob.at("model").dump());
    if (blob.contains("trainer")) {
      const auto& t = blob["trainer"];
      TrainerState s;
      s.step = t.at("step").get<std::uint64_t>();
      s.epoch = t.at("epoch").get<std::uint64_t>();
      s.lr = t.at("lr").get<double>();
      s.beta1 = t.at("beta1").get<double>();
      s.beta2 = t.at("beta2").get<double>();
      s.eps = t.at("eps").get<double>();
      s.rng_state = t.at("rng").get<std::string>();
      s.best_val_recall = t.at("best_val_recall").get<double>();
      ck.trainer = std::move(s);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint config blob is malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw CorruptionError(std::string("checkpoint config blob is invalid: ") + e.what());
  }

  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>("tensor name length");
    std::string name(r.take(name_len, "tensor name"), name_len);
    const auto rank = r.get<std::uint8_t>("tensor rank");
    if (rank == 0) throw CorruptionError("tensor '" + name + "' has rank 0");
    Shape shape;
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const auto dim = r.get<std::uint32_t>("tensor dims");
      if (dim == 0) throw CorruptionError("tensor '" + name + "' has a zero dimension");
      shape.push_back(dim);
      numel *= dim;
    }
    if (numel > r.remaining() / sizeof(float)) {
      throw CorruptionError("checkpoint truncated in tensor '" + name + "': needs " +
                            std::to_string(numel * sizeof(float)) + " bytes, " + std::to_string(r.remaining()) +
                            " remain");
    }
    std::vector<float> values(numel);
    std::memcpy(values.data(), r.take(numel * sizeof(float), "tensor payload"), numel * sizeof(float));
    Tensor t(std::move(shape), std::move(values));
    if (name.rfind(kMomentM, 0) == 0 || name.rfind(kMomentV, 0) == 0) {
      if (!ck.trainer) throw CorruptionError("optimizer tensor '" + name + "' without trainer state");
      const bool is_m = name.rfind(kMomentM, 0) == 0;
      auto& list = is_m ? ck.trainer->m : ck.trainer->v;
      list.push_back({name.substr(kMomentM.size()), std::move(t)});
    } else {
      ck.tensors.push_back({std::move(name), std::move(t)});
    }
  }
  if (r.remaining() != 0) {
    throw CorruptionError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes after " +
                          std::to_string(count) + " tensors");
  }
  if (ck.trainer && ck.trainer->m.size() != ck.trainer->v.size()) {
    throw CorruptionError("optimizer first and second moments differ in count");
  }
  return ck;
}

}  // namespace avm
