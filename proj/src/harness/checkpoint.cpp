#include "omae/harness/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace omae::harness {

namespace {

using Kind = CheckpointError::Kind;

class Writer {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i)
      out_.push_back(static_cast<std::uint8_t>(static_cast<std::make_unsigned_t<U>>(v) >> (8 * i)));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void put_floats(std::span<const float> v) {
    for (float f : v) put(std::bit_cast<std::uint32_t>(f));
  }
  void put_bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n)
      throw CheckpointError(Kind::Truncated, std::string("checkpoint truncated while reading ") + what + " at byte " +
                                                 std::to_string(pos_));
  }
  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    std::make_unsigned_t<U> v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<std::make_unsigned_t<U>>(static_cast<std::make_unsigned_t<U>>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string get_string(const char* what) { return get_string(get<std::uint32_t>(what), what); }
  std::vector<float> get_floats(std::uint64_t n, const char* what) {
    if (n > (in_.size() - pos_) / 4) need(in_.size() - pos_ + 1, what);
    std::vector<float> v(n);
    for (auto& f : v) f = std::bit_cast<float>(get<std::uint32_t>(what));
    return v;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

const CheckpointTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::set<std::string> names;
  for (const auto& t : ckpt.tensors) {
    if (!names.insert(t.name).second) throw CheckpointError(Kind::Duplicate, "duplicate tensor name " + t.name);
    if (numel(t.shape) != t.values.size())
      throw CheckpointError(Kind::ShapeMismatch, "tensor " + t.name + " has " + std::to_string(t.values.size()) +
                                                     " values for shape " + shape_str(t.shape));
  }
  Writer w;
  w.put_bytes(std::string_view(kCheckpointMagic, 4));
  w.put(kCheckpointVersion);
  const std::string header =
      nlohmann::json{{"kind", ckpt.kind}, {"config", ckpt.config}, {"metadata", ckpt.metadata}}.dump();
  w.put(static_cast<std::uint64_t>(header.size()));
  w.put_bytes(header);
  w.put(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    w.put_string(t.name);
    w.put(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.put(static_cast<std::uint64_t>(d));
    w.put(static_cast<std::uint64_t>(4 * t.values.size()));
    w.put_floats(t.values);
  }
  w.put(static_cast<std::uint8_t>(ckpt.optimizer ? 1 : 0));
  if (ckpt.optimizer) {
    const auto& o = *ckpt.optimizer;
    if (o.first.size() != o.names.size() || o.second.size() != o.names.size())
      throw CheckpointError(Kind::Corrupt, "optimizer state lists differ in length");
    w.put(o.step);
    w.put(static_cast<std::uint32_t>(o.names.size()));
    for (std::size_t i = 0; i < o.names.size(); ++i) {
      if (o.first[i].size() != o.second[i].size())
        throw CheckpointError(Kind::Corrupt, "optimizer moments of " + o.names[i] + " differ in length");
      w.put_string(o.names[i]);
      w.put(static_cast<std::uint64_t>(o.first[i].size()));
      w.put_floats(o.first[i]);
      w.put_floats(o.second[i]);
    }
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.get_string(4, "magic");
  if (magic != std::string_view(kCheckpointMagic, 4))
    throw CheckpointError(Kind::BadMagic, "not a checkpoint file (bad magic bytes)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError(Kind::BadVersion, "unsupported checkpoint version " + std::to_string(version) +
                                                " (expected " + std::to_string(kCheckpointVersion) + ")");
  Checkpoint c;
  const auto header_len = r.get<std::uint64_t>("header length");
  r.need(header_len, "header");
  try {
    const auto header = nlohmann::json::parse(r.get_string(header_len, "header"));
    c.kind = header.at("kind").get<std::string>();
    c.config = header.at("config");
    c.metadata = header.at("metadata");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::Corrupt, std::string("checkpoint header is not valid: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.get_string("tensor name");
    if (!names.insert(t.name).second) throw CheckpointError(Kind::Duplicate, "duplicate tensor name " + t.name);
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank > 8) throw CheckpointError(Kind::Corrupt, "tensor " + t.name + " has implausible rank");
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("tensor shape")));
      n *= t.shape.back();
    }
    const auto byte_len = r.get<std::uint64_t>("tensor byte length");
    if (byte_len != 4 * n)
      throw CheckpointError(Kind::Corrupt, "tensor " + t.name + " byte length " + std::to_string(byte_len) +
                                               " does not match shape " + shape_str(t.shape));
    t.values = r.get_floats(n, "tensor data");
    c.tensors.push_back(std::move(t));
  }
  if (r.get<std::uint8_t>("optimizer flag")) {
    OptimizerState o;
    o.step = r.get<std::int64_t>("optimizer step");
    const auto n = r.get<std::uint32_t>("optimizer count");
    for (std::uint32_t i = 0; i < n; ++i) {
      o.names.push_back(r.get_string("optimizer name"));
      const auto len = r.get<std::uint64_t>("optimizer length");
      o.first.push_back(r.get_floats(len, "optimizer moments"));
      o.second.push_back(r.get_floats(len, "optimizer moments"));
    }
    c.optimizer = std::move(o);
  }
  if (!r.done()) throw CheckpointError(Kind::Corrupt, "trailing bytes after checkpoint");
  return c;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(Kind::Io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(Kind::Io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::Io, "cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.kind(), path.string() + ": " + e.what());
  }
}

std::vector<CheckpointTensor> tensors_from(const ParamList<float>& params) {
  std::vector<CheckpointTensor> out;
  for (const auto& p : params) out.push_back({p.name, p.tensor.shape(), p.tensor.values()});
  return out;
}

std::size_t load_into(const Checkpoint& ckpt, ParamList<float>& params, const std::string& prefix,
                      bool require_all) {
  auto under = [&](const std::string& name) { return name.compare(0, prefix.size(), prefix) == 0; };
  // Validate everything before copying so a failed load leaves params untouched.
  std::vector<std::pair<const CheckpointTensor*, Tensor<float>*>> plan;
  for (const auto& t : ckpt.tensors) {
    if (!under(t.name)) continue;
    auto it = std::find_if(params.begin(), params.end(), [&](const auto& p) { return p.name == t.name; });
    if (it == params.end())
      throw CheckpointError(Kind::MissingTensor, "checkpoint tensor " + t.name + " has no counterpart in the model");
    if (it->tensor.shape() != t.shape)
      throw CheckpointError(Kind::ShapeMismatch, "shape mismatch for " + t.name + ": checkpoint " +
                                                     shape_str(t.shape) + ", model " +
                                                     shape_str(it->tensor.shape()));
    plan.emplace_back(&t, &it->tensor);
  }
  if (require_all)
    for (const auto& p : params)
      if (under(p.name) && !ckpt.find(p.name))
        throw CheckpointError(Kind::MissingTensor, "model tensor " + p.name + " is missing from the checkpoint");
  for (auto& [src, dst] : plan) dst->values() = src->values;
  return plan.size();
}

OptimizerState optimizer_state(const AdamW& opt) {
  OptimizerState s;
  s.step = opt.steps();
  for (const auto& p : opt.params()) s.names.push_back(p.name);
  s.first = opt.first_moments();
  s.second = opt.second_moments();
  return s;
}

void restore_optimizer(const OptimizerState& state, AdamW& opt) {
  const auto& ps = opt.params();
  if (state.names.size() != ps.size())
    throw CheckpointError(Kind::ShapeMismatch, "optimizer state has " + std::to_string(state.names.size()) +
                                                   " entries, optimizer has " + std::to_string(ps.size()));
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (state.names[i] != ps[i].name || state.first[i].size() != ps[i].tensor.numel())
      throw CheckpointError(Kind::ShapeMismatch, "optimizer state mismatch at " + ps[i].name);
  opt.first_moments() = state.first;
  opt.second_moments() = state.second;
  opt.set_steps(state.step);
}

Checkpoint mae_checkpoint(const mae::MaeModel<float>& model, const nlohmann::json& metadata, const AdamW* opt) {
  Checkpoint c;
  c.kind = "mae";
  c.config = {{"vit", model.config}};
  c.metadata = metadata;
  ParamList<float> ps;
  model.collect(ps);
  c.tensors = tensors_from(ps);
  if (opt) c.optimizer = optimizer_state(*opt);
  return c;
}

namespace {

void expect_kind(const Checkpoint& c, const std::string& kind) {
  if (c.kind != kind)
    throw CheckpointError(Kind::Corrupt, "expected a '" + kind + "' checkpoint, found '" + c.kind + "'");
}

vit::ViTConfig vit_config_of(const Checkpoint& c) {
  try {
    return c.config.at("vit").get<vit::ViTConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::Corrupt, std::string("checkpoint has no usable architecture config: ") + e.what());
  }
}

}  // namespace

mae::MaeModel<float> load_mae(const Checkpoint& ckpt) {
  expect_kind(ckpt, "mae");
  Rng rng(0);
  auto model = mae::MaeModel<float>::create(vit_config_of(ckpt), rng);
  ParamList<float> ps;
  model.collect(ps);
  load_into(ckpt, ps);
  return model;
}

Checkpoint classifier_checkpoint(const classify::Classifier<float>& model, const std::vector<std::string>& classes,
                                 const nlohmann::json& metadata) {
  Checkpoint c;
  c.kind = "classifier";
  c.config = {{"vit", model.config},
              {"mode", classify::to_string(model.mode)},
              {"classes", classes},
              {"hidden_width", model.head.has_hidden() ? model.head.hidden.out_features() : 0}};
  c.metadata = metadata;
  ParamList<float> ps;
  model.collect(ps);
  c.tensors = tensors_from(ps);
  return c;
}

LoadedClassifier load_classifier(const Checkpoint& ckpt) {
  expect_kind(ckpt, "classifier");
  LoadedClassifier out;
  out.classes = ckpt.config.at("classes").get<std::vector<std::string>>();
  Rng rng(0);
  out.model = classify::Classifier<float>::create(
      vit_config_of(ckpt), out.classes.size(), classify::parse_mode(ckpt.config.at("mode").get<std::string>()),
      ckpt.config.value("hidden_width", std::size_t{0}), rng);
  ParamList<float> ps;
  out.model.collect(ps);
  load_into(ckpt, ps);
  return out;
}

void load_encoder(const Checkpoint& ckpt, vit::VitEncoder<float>& encoder) {
  ParamList<float> ps;
  encoder.collect("encoder", ps);
  if (load_into(ckpt, ps, "encoder.") == 0)
    throw CheckpointError(Kind::MissingTensor, "checkpoint holds no encoder tensors");
}

Checkpoint vqa_checkpoint(const vqa::VqaModel<float>& model, const vqa::Tokenizer& tok, const nlohmann::json& metadata) {
  Checkpoint c;
  c.kind = "vqa";
  c.config = {{"vit", model.vit_config}, {"vqa", model.config}, {"vocabulary", tok.to_json()}};
  c.metadata = metadata;
  ParamList<float> ps;
  model.collect_all(ps);
  c.tensors = tensors_from(ps);
  return c;
}

LoadedVqa load_vqa(const Checkpoint& ckpt) {
  expect_kind(ckpt, "vqa");
  LoadedVqa out;
  out.tokenizer = vqa::Tokenizer::from_json(ckpt.config.at("vocabulary"));
  Rng rng(0);
  out.model = vqa::VqaModel<float>::create(vit_config_of(ckpt), ckpt.config.at("vqa").get<vqa::VqaConfig>(),
                                           out.tokenizer.size(), rng);
  ParamList<float> ps;
  out.model.collect_all(ps);
  load_into(ckpt, ps);
  return out;
}

}  // namespace omae::harness
