#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "cesaa/config.hpp"
#include "cesaa/training.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace cesaa {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'C', 'E', 'S', 'A', 'A', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

enum SectionKind : std::uint8_t { kMatrix = 0, kBytes = 1 };

std::uint64_t fnv64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

struct Section {
  std::uint8_t kind = kBytes;
  Shape shape;                 // matrix sections
  std::vector<double> values;  // matrix sections
  std::string bytes;           // byte sections
};

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw DataError("cannot open checkpoint '" + path + "' for writing");
  }

  void header(std::uint64_t digest) {
    out_.write(kMagic, sizeof(kMagic));
    u32(kVersion);
    u64(digest);
  }

  void matrix(const std::string& name, Shape shape, std::span<const double> values) {
    section_name(name);
    u8(kMatrix);
    u32(static_cast<std::uint32_t>(shape.rows));
    u32(static_cast<std::uint32_t>(shape.cols));
    out_.write(reinterpret_cast<const char*>(values.data()),
               static_cast<std::streamsize>(values.size() * sizeof(double)));
  }

  void bytes(const std::string& name, const std::string& payload) {
    section_name(name);
    u8(kBytes);
    u32(static_cast<std::uint32_t>(payload.size()));
    out_.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  }

  void finish() {
    out_.flush();
    if (!out_) throw DataError("failed writing checkpoint '" + path_ + "'");
  }

 private:
  void section_name(const std::string& name) {
    u32(static_cast<std::uint32_t>(name.size()));
    out_.write(name.data(), static_cast<std::streamsize>(name.size()));
  }
  void u8(std::uint8_t v) { out_.write(reinterpret_cast<const char*>(&v), 1); }
  void u32(std::uint32_t v) { out_.write(reinterpret_cast<const char*>(&v), 4); }
  void u64(std::uint64_t v) { out_.write(reinterpret_cast<const char*>(&v), 8); }

  std::ofstream out_;
  std::string path_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw DataError("cannot open checkpoint '" + path + "'");
    char magic[8];
    must_read(magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
      throw FormatError("'" + path + "' is not a checkpoint file (bad magic)");
    const std::uint32_t version = u32("version");
    if (version != kVersion)
      throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (want " +
                        std::to_string(kVersion) + ")");
    digest_ = u64("digest");
    read_sections();
  }

  std::uint64_t digest() const { return digest_; }

  const Section& section(const std::string& name) const {
    auto it = sections_.find(name);
    if (it == sections_.end())
      throw FormatError("checkpoint '" + path_ + "' is missing section '" + name + "'");
    return it->second;
  }

  const Section& matrix(const std::string& name, Shape expected) const {
    const Section& s = section(name);
    if (s.kind != kMatrix)
      throw FormatError("checkpoint section '" + name + "' is not a matrix");
    if (!(s.shape == expected))
      throw FormatError("checkpoint section '" + name + "' has shape " + to_string(s.shape) +
                        ", config expects " + to_string(expected));
    return s;
  }

 private:
  void read_sections() {
    while (true) {
      std::uint32_t name_len;
      in_.read(reinterpret_cast<char*>(&name_len), 4);
      if (in_.gcount() == 0 && in_.eof()) break;
      if (in_.gcount() != 4) throw FormatError(truncated());
      std::string name(name_len, '\0');
      must_read(name.data(), name_len, "section name");
      Section s;
      s.kind = u8("section kind");
      if (s.kind == kMatrix) {
        s.shape.rows = static_cast<int>(u32("matrix rows"));
        s.shape.cols = static_cast<int>(u32("matrix cols"));
        if (s.shape.rows <= 0 || s.shape.cols <= 0) throw FormatError(truncated());
        s.values.resize(static_cast<std::size_t>(s.shape.rows) * s.shape.cols);
        must_read(reinterpret_cast<char*>(s.values.data()), s.values.size() * sizeof(double),
                  "matrix data");
      } else if (s.kind == kBytes) {
        const std::uint32_t len = u32("byte section length");
        s.bytes.resize(len);
        must_read(s.bytes.data(), len, "byte section data");
      } else {
        throw FormatError("checkpoint section '" + name + "' has unknown kind");
      }
      sections_.emplace(std::move(name), std::move(s));
    }
  }

  std::string truncated() const { return "checkpoint '" + path_ + "' is truncated"; }

  void must_read(char* dst, std::size_t n, const char*) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError(truncated());
  }
  std::uint8_t u8(const char* what) {
    std::uint8_t v;
    must_read(reinterpret_cast<char*>(&v), 1, what);
    return v;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    must_read(reinterpret_cast<char*>(&v), 4, what);
    return v;
  }
  std::uint64_t u64(const char* what) {
    std::uint64_t v;
    must_read(reinterpret_cast<char*>(&v), 8, what);
    return v;
  }

  std::ifstream in_;
  std::string path_;
  std::uint64_t digest_ = 0;
  std::map<std::string, Section> sections_;
};

std::string pack_u64(std::initializer_list<std::uint64_t> values) {
  std::string s;
  s.resize(values.size() * 8);
  std::size_t off = 0;
  for (std::uint64_t v : values) {
    std::memcpy(s.data() + off, &v, 8);
    off += 8;
  }
  return s;
}

std::vector<std::uint64_t> unpack_u64(const std::string& s, std::size_t count,
                                      const std::string& name) {
  if (s.size() != count * 8)
    throw FormatError("checkpoint section '" + name + "' has unexpected size");
  std::vector<std::uint64_t> out(count);
  std::memcpy(out.data(), s.data(), s.size());
  return out;
}

json embedded_config(const TrainConfig& cfg, const Dataset& data,
                     const std::string& run_config_json) {
  json doc;
  doc["train"] = to_json(cfg);
  doc["data_shape"] = json{{"n_domains", data.n_domains}, {"vocab_sizes", data.vocab_sizes}};
  doc["run"] = run_config_json;
  return doc;
}

}  // namespace

void Trainer::save_checkpoint(const std::string& path, const std::string& run_config_json) const {
  const std::string config_bytes = embedded_config(cfg_, *data_, run_config_json).dump();

  Writer w(path);
  w.header(fnv64(config_bytes));
  w.bytes("config", config_bytes);
  w.bytes("trainer", pack_u64({static_cast<std::uint64_t>(epoch_),
                               static_cast<std::uint64_t>(pos_), global_step_}));
  const auto rs = noise_rng_.state();
  w.bytes("rng", pack_u64({rs[0], rs[1], rs[2], rs[3]}));
  w.bytes("adam", pack_u64({adam_.step_count()}));

  for (const Parameter* p : const_cast<CesModel&>(*model_).parameters())
    w.matrix("param." + p->name, p->shape, p->values);

  Adam& adam = const_cast<Adam&>(adam_);
  const auto params = adam.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    w.matrix("adam.m." + params[i]->name, params[i]->shape, adam.moment1(i));
    w.matrix("adam.v." + params[i]->name, params[i]->shape, adam.moment2(i));
  }

  w.matrix("aea.joint", {jpm_.n_domains(), jpm_.n_experts()}, jpm_.values());
  w.finish();
}

Trainer Trainer::restore_checkpoint(const std::string& path, const Dataset& train_data) {
  Reader r(path);
  const json config = json::parse(r.section("config").bytes, nullptr, false);
  if (config.is_discarded()) throw FormatError("checkpoint config section is not valid JSON");

  const TrainConfig cfg = train_config_from_json(config.at("train"));
  const json& shape = config.at("data_shape");
  if (shape.at("n_domains").get<int>() != train_data.n_domains ||
      shape.at("vocab_sizes").get<std::vector<int>>() != train_data.vocab_sizes)
    throw FormatError("checkpoint was trained on a dataset with a different shape");

  Trainer t(cfg, train_data);

  const auto trainer_state = unpack_u64(r.section("trainer").bytes, 3, "trainer");
  t.epoch_ = static_cast<int>(trainer_state[0]);
  t.pos_ = static_cast<std::size_t>(trainer_state[1]);
  t.global_step_ = trainer_state[2];
  if (t.pos_ >= train_data.samples.size() && t.pos_ != 0)
    throw FormatError("checkpoint position exceeds dataset size");
  if (t.pos_ != 0) t.rebuild_permutation();

  const auto rng_state = unpack_u64(r.section("rng").bytes, 4, "rng");
  t.noise_rng_.set_state({rng_state[0], rng_state[1], rng_state[2], rng_state[3]});
  t.adam_.set_step_count(unpack_u64(r.section("adam").bytes, 1, "adam")[0]);

  for (Parameter* p : t.model_->parameters())
    p->values = r.matrix("param." + p->name, p->shape).values;
  const auto params = t.adam_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    t.adam_.moment1(i) = r.matrix("adam.m." + params[i]->name, params[i]->shape).values;
    t.adam_.moment2(i) = r.matrix("adam.v." + params[i]->name, params[i]->shape).values;
  }
  t.jpm_.set_values(r.matrix("aea.joint", {t.jpm_.n_domains(), t.jpm_.n_experts()}).values);
  return t;
}

LoadedModel load_model(const std::string& path) {
  Reader r(path);
  const json config = json::parse(r.section("config").bytes, nullptr, false);
  if (config.is_discarded()) throw FormatError("checkpoint config section is not valid JSON");

  TrainConfig cfg = train_config_from_json(config.at("train"));
  const json& shape = config.at("data_shape");

  ModelConfig mc;
  mc.variant = cfg.variant;
  mc.n_experts = cfg.n_experts;
  mc.top_k = cfg.top_k;
  mc.hidden = cfg.hidden;
  mc.embed_dim = cfg.embed_dim;
  mc.n_domains = shape.at("n_domains").get<int>();
  mc.data_vocab_sizes = shape.at("vocab_sizes").get<std::vector<int>>();

  Rng init_rng = Rng::derive(cfg.seed, {detail::kInitStream});
  LoadedModel lm{cfg, config.at("run").get<std::string>(), std::make_unique<CesModel>(mc, init_rng),
                 JointProbabilityMatrix(mc.n_domains,
                                        cfg.variant == Variant::kDnn ? 1 : cfg.n_experts,
                                        cfg.ema_beta)};
  for (Parameter* p : lm.model->parameters())
    p->values = r.matrix("param." + p->name, p->shape).values;
  lm.jpm.set_values(r.matrix("aea.joint", {lm.jpm.n_domains(), lm.jpm.n_experts()}).values);
  return lm;
}

}  // namespace cesaa
