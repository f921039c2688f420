#include "mgil/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mgil {

namespace {

class Writer {
public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  void tensor(const Tensor<float>& t) {
    const Shape& s = t.shape();
    for (std::size_t d : {s.n, s.c, s.h, s.w}) u64(d);
    for (float v : t.data()) u32(std::bit_cast<std::uint32_t>(v));
  }
  std::vector<unsigned char> take() { return std::move(out_); }

private:
  std::vector<unsigned char> out_;
};

class Reader {
public:
  explicit Reader(const std::vector<unsigned char>& in) : in_(in) {}

  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw CheckpointError("checkpoint: truncated while reading " + std::string(what) + " at byte " +
                            std::to_string(pos_));
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return in_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string bytes(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  /// Element counts are bounded by the bytes left, so corrupt lengths fail
  /// before any large allocation.
  std::uint64_t count(std::size_t min_bytes_each, const char* what) {
    const std::uint64_t n = u64(what);
    if (min_bytes_each > 0 && n > (in_.size() - pos_) / min_bytes_each) {
      throw CheckpointError("checkpoint: implausible " + std::string(what) + " count " + std::to_string(n));
    }
    return n;
  }
  Tensor<float> tensor(const char* what) {
    Shape s;
    s.n = u64(what);
    s.c = u64(what);
    s.h = u64(what);
    s.w = u64(what);
    const std::uint64_t dims[] = {s.n, s.c, s.h, s.w};
    std::uint64_t size = 1;
    for (std::uint64_t d : dims) {
      if (d != 0 && size > (in_.size() - pos_) / 4 / d) {
        throw CheckpointError("checkpoint: implausible shape for " + std::string(what));
      }
      size *= d;
    }
    need(size * 4, what);
    Tensor<float> t(s);
    for (auto& v : t.data()) v = std::bit_cast<float>(u32(what));
    return t;
  }
  bool done() const { return pos_ == in_.size(); }
  std::size_t pos() const { return pos_; }

private:
  const std::vector<unsigned char>& in_;
  std::size_t pos_ = 0;
};

constexpr std::size_t kMagicLength = sizeof(kCheckpointMagic) - 1;

}  // namespace

std::vector<unsigned char> encode_checkpoint(const Checkpoint& c) {
  Writer w;
  w.bytes(std::string_view(kCheckpointMagic, kMagicLength));
  w.u32(kCheckpointVersion);
  w.u64(c.config_hash);
  w.u64(c.config_json.size());
  w.bytes(c.config_json);
  w.u64(c.epoch);
  w.u64(c.global_step);
  for (std::uint64_t s : c.rng) w.u64(s);
  w.u64(c.history.size());
  for (const auto& e : c.history) {
    w.u64(e.epoch);
    w.f64(e.train_loss);
    w.f64(e.metric);
    w.f64(e.seconds);
  }
  w.u64(c.tensors.size());
  for (const auto& t : c.tensors) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name);
    w.tensor(t.tensor);
  }
  w.u8(static_cast<std::uint8_t>(c.optim_kind));
  w.u64(c.optim_steps);
  w.u64(c.optim_total_steps);
  for (const auto* moments : {&c.first_moments, &c.second_moments}) {
    w.u64(moments->size());
    for (const auto& t : *moments) w.tensor(t);
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < kMagicLength || std::memcmp(bytes.data(), kCheckpointMagic, kMagicLength) != 0) {
    throw CheckpointError("checkpoint: bad magic, expected " + std::string(kCheckpointMagic));
  }
  Reader r(bytes);
  r.bytes(kMagicLength, "magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  Checkpoint c;
  c.config_hash = r.u64("config hash");
  c.config_json = r.bytes(r.count(1, "config"), "config");
  c.epoch = r.u64("epoch");
  c.global_step = r.u64("global step");
  for (auto& s : c.rng) s = r.u64("generator state");
  const std::uint64_t history = r.count(32, "history");
  for (std::uint64_t i = 0; i < history; ++i) {
    EpochRecord e;
    e.epoch = r.u64("history");
    e.train_loss = r.f64("history");
    e.metric = r.f64("history");
    e.seconds = r.f64("history");
    c.history.push_back(e);
  }
  const std::uint64_t tensors = r.count(36, "tensor");
  for (std::uint64_t i = 0; i < tensors; ++i) {
    NamedFloatTensor t;
    t.name = r.bytes(r.u32("tensor name"), "tensor name");
    t.tensor = r.tensor("tensor data");
    c.tensors.push_back(std::move(t));
  }
  const std::uint8_t kind = r.u8("optimizer kind");
  if (kind > static_cast<std::uint8_t>(OptimKind::adam)) {
    throw CheckpointError("checkpoint: unknown optimizer kind " + std::to_string(kind));
  }
  c.optim_kind = static_cast<OptimKind>(kind);
  c.optim_steps = r.u64("optimizer steps");
  c.optim_total_steps = r.u64("optimizer total steps");
  for (auto* moments : {&c.first_moments, &c.second_moments}) {
    const std::uint64_t n = r.count(32, "optimizer moments");
    for (std::uint64_t i = 0; i < n; ++i) moments->push_back(r.tensor("optimizer moments"));
  }
  if (!r.done()) {
    throw CheckpointError("checkpoint: " + std::to_string(bytes.size() - r.pos()) + " trailing bytes");
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("checkpoint: cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Checkpoint capture_checkpoint(const RunConfig& config, Net<float>& net, Trainer& trainer) {
  Checkpoint c;
  c.config_json = dump_config(config);
  c.config_hash = fnv1a64(c.config_json);
  c.epoch = trainer.epoch();
  c.global_step = trainer.global_step();
  c.rng = trainer.rng().state();
  c.history = trainer.record().epochs;
  for (const auto& p : net.parameters()) c.tensors.push_back({p.name, *p.tensor});
  Optimizer& opt = trainer.optimizer();
  c.optim_kind = opt.config().kind;
  c.optim_steps = opt.steps_taken();
  c.optim_total_steps = opt.total_steps();
  c.first_moments = opt.first_moments();
  c.second_moments = opt.second_moments();
  return c;
}

void restore_parameters(const Checkpoint& c, Net<float>& net) {
  const auto params = net.parameters();
  if (params.size() != c.tensors.size()) {
    throw CheckpointError("checkpoint: holds " + std::to_string(c.tensors.size()) + " tensors, net has " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& saved = c.tensors[i];
    if (saved.name != params[i].name) {
      throw CheckpointError("checkpoint: tensor " + std::to_string(i) + " is '" + saved.name + "', net expects '" +
                            params[i].name + "'");
    }
    if (saved.tensor.shape() != params[i].tensor->shape()) {
      throw CheckpointError("checkpoint: '" + saved.name + "' has shape " + saved.tensor.shape().str() +
                            ", net expects " + params[i].tensor->shape().str());
    }
    std::copy(saved.tensor.data().begin(), saved.tensor.data().end(), params[i].tensor->data().begin());
  }
}

void restore_training(const Checkpoint& c, Net<float>& net, Trainer& trainer) {
  restore_parameters(c, net);
  Optimizer& opt = trainer.optimizer();
  if (c.optim_kind != opt.config().kind || c.optim_total_steps != opt.total_steps()) {
    throw CheckpointError("checkpoint: optimizer state does not match the configured optimizer");
  }
  opt.restore(c.optim_steps, c.first_moments, c.second_moments);
  trainer.rng().set_state(c.rng);
  trainer.resume(c.epoch, c.global_step);
  trainer.record().epochs = c.history;
}

}  // namespace mgil
