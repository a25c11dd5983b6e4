#include "radd/checkpoint.hpp"

#include "radd/errors.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

namespace radd::ckpt {

namespace {

constexpr char kMagic[8] = {'R', 'A', 'D', 'D', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <class T>
  void le(T v) {
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
    bytes(buf, sizeof buf);
  }
  void f32(float f) { le(std::bit_cast<std::uint32_t>(f)); }
  void str(const std::string& s) {
    le(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::string& data() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& data, std::string what) : data_(data), what_(std::move(what)) {}
  const char* take(std::size_t n) {
    if (data_.size() - pos_ < n) throw DataError(what_ + ": truncated");
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  template <class T>
  T le() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(sizeof(T)));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return static_cast<T>(v);
  }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  std::string str() {
    const auto n = le<std::uint32_t>();
    return std::string(take(n), n);
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::string what_;
  std::size_t pos_ = 0;
};

void write_tensor_list(Writer& w, const std::vector<ConstNamedTensor>& tensors) {
  w.le(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.str(t.name);
    w.le(static_cast<std::uint32_t>(t.tensor->rows()));
    w.le(static_cast<std::uint32_t>(t.tensor->cols()));
    for (Eigen::Index i = 0; i < t.tensor->size(); ++i) w.f32(static_cast<float>(t.tensor->data()[i]));
  }
}

void read_tensor_list(const std::string& payload, const std::string& segment, const std::vector<NamedTensor>& expected) {
  Reader r(payload, "checkpoint segment '" + segment + "'");
  const auto count = r.le<std::uint32_t>();
  if (count != expected.size())
    throw ShapeError("checkpoint segment '" + segment + "': expected " + std::to_string(expected.size()) +
                     " tensors, found " + std::to_string(count));
  for (const auto& t : expected) {
    const std::string name = r.str();
    if (name != t.name)
      throw ShapeError("checkpoint segment '" + segment + "': expected tensor '" + t.name + "', found '" + name + "'");
    const auto rows = r.le<std::uint32_t>();
    const auto cols = r.le<std::uint32_t>();
    if (rows != t.tensor->rows() || cols != t.tensor->cols())
      throw ShapeError("checkpoint shape mismatch for " + segment + "/" + name + ": stored " + std::to_string(rows) +
                       "x" + std::to_string(cols) + ", configuration implies " + std::to_string(t.tensor->rows()) +
                       "x" + std::to_string(t.tensor->cols()));
    for (Eigen::Index i = 0; i < t.tensor->size(); ++i) t.tensor->data()[i] = static_cast<double>(r.f32());
  }
  if (!r.done()) throw DataError("checkpoint segment '" + segment + "': trailing bytes");
}

std::vector<ConstNamedTensor> moments(const std::vector<Matrix>& m, const std::vector<ConstNamedTensor>& names) {
  std::vector<ConstNamedTensor> out;
  for (std::size_t i = 0; i < m.size(); ++i) out.push_back({names[i].name, &m[i]});
  return out;
}

std::vector<NamedTensor> moments(std::vector<Matrix>& m, const std::vector<NamedTensor>& names) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < m.size(); ++i) out.push_back({names[i].name, &m[i]});
  return out;
}

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string history_text(const std::vector<trainer::EvalRecord>& history) {
  std::string out;
  for (const auto& r : history) {
    const auto& l = r.losses;
    out += std::to_string(r.epoch);
    for (double v : {l.kge, l.diff, l.tail, l.head, l.distill, l.rank, l.total}) out += "\t" + g17(v);
    for (const auto* m : {&r.valid.overall, &r.valid.head, &r.valid.tail})
      out += "\t" + g17(m->mrr) + "\t" + g17(m->hits1) + "\t" + g17(m->hits3) + "\t" + g17(m->hits10) + "\t" +
             std::to_string(m->count);
    out += "\n";
  }
  return out;
}

std::vector<trainer::EvalRecord> parse_history(const std::string& text) {
  std::vector<trainer::EvalRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    trainer::EvalRecord r;
    auto& l = r.losses;
    fields >> r.epoch >> l.kge >> l.diff >> l.tail >> l.head >> l.distill >> l.rank >> l.total;
    for (auto* m : {&r.valid.overall, &r.valid.head, &r.valid.tail})
      fields >> m->mrr >> m->hits1 >> m->hits3 >> m->hits10 >> m->count;
    if (fields.fail()) throw DataError("checkpoint history: malformed line '" + line + "'");
    out.push_back(r);
  }
  return out;
}

std::size_t meta_value(const std::map<std::string, std::string>& meta, const std::string& key) {
  const auto it = meta.find(key);
  if (it == meta.end()) throw DataError("checkpoint meta: missing key '" + key + "'");
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw DataError("checkpoint meta: bad value for '" + key + "'");
  }
}

const char* const kSegments[] = {"config",         "meta",           "history",        "retriever",
                                 "denoiser",       "denoiser_ema",   "adam_retriever.m", "adam_retriever.v",
                                 "adam_denoiser.m", "adam_denoiser.v"};

}  // namespace

std::string serialize(const Checkpoint& c) {
  const auto& s = c.state;
  std::vector<std::pair<std::string, std::string>> segs;
  segs.emplace_back("config", to_text(c.config));
  std::string meta;
  meta += "n_entities=" + std::to_string(c.n_entities) + "\n";
  meta += "n_relations=" + std::to_string(c.n_relations) + "\n";
  meta += "visual_dim=" + std::to_string(c.visual_dim) + "\n";
  meta += "textual_dim=" + std::to_string(c.textual_dim) + "\n";
  meta += "epoch=" + std::to_string(s.epoch) + "\n";
  meta += "adam_retriever.steps=" + std::to_string(s.adam_retriever.step_count()) + "\n";
  meta += "adam_denoiser.steps=" + std::to_string(s.adam_denoiser.step_count()) + "\n";
  segs.emplace_back("meta", meta);
  segs.emplace_back("history", history_text(s.history));
  auto tensor_seg = [&](const std::string& name, const std::vector<ConstNamedTensor>& tensors) {
    Writer w;
    write_tensor_list(w, tensors);
    segs.emplace_back(name, std::move(w.data()));
  };
  tensor_seg("retriever", s.retriever.tensors());
  tensor_seg("denoiser", s.denoiser.tensors());
  tensor_seg("denoiser_ema", s.denoiser_ema.tensors());
  tensor_seg("adam_retriever.m", moments(s.adam_retriever.first_moment(), s.retriever.tensors()));
  tensor_seg("adam_retriever.v", moments(s.adam_retriever.second_moment(), s.retriever.tensors()));
  tensor_seg("adam_denoiser.m", moments(s.adam_denoiser.first_moment(), s.denoiser.tensors()));
  tensor_seg("adam_denoiser.v", moments(s.adam_denoiser.second_moment(), s.denoiser.tensors()));

  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.le(kFormatVersion);
  w.le(static_cast<std::uint32_t>(segs.size()));
  for (const auto& [name, payload] : segs) {
    w.str(name);
    w.le(static_cast<std::uint64_t>(payload.size()));
    w.bytes(payload.data(), payload.size());
  }
  return std::move(w.data());
}

Checkpoint deserialize(const std::string& bytes) {
  Reader r(bytes, "checkpoint");
  if (std::memcmp(r.take(sizeof kMagic), kMagic, sizeof kMagic) != 0) throw DataError("checkpoint: bad magic");
  const auto version = r.le<std::uint32_t>();
  if (version != kFormatVersion)
    throw DataError("checkpoint: format version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kFormatVersion) + ")");
  const auto n_segments = r.le<std::uint32_t>();
  std::map<std::string, std::string> segs;
  for (std::uint32_t i = 0; i < n_segments; ++i) {
    std::string name = r.str();
    const auto len = r.le<std::uint64_t>();
    if (len > bytes.size()) throw DataError("checkpoint: truncated");
    segs[name] = std::string(r.take(static_cast<std::size_t>(len)), static_cast<std::size_t>(len));
  }
  if (!r.done()) throw DataError("checkpoint: trailing bytes");
  for (const char* name : kSegments)
    if (!segs.count(name)) throw DataError(std::string("checkpoint: missing segment '") + name + "'");

  Checkpoint c;
  c.config = parse_run_config(segs["config"]);
  if (const auto errors = c.config.train.validate(); !errors.empty())
    throw ConfigError("checkpoint config is invalid: " + errors.front());
  std::map<std::string, std::string> meta;
  {
    std::istringstream in(segs["meta"]);
    std::string line;
    while (std::getline(in, line))
      if (auto eq = line.find('='); eq != std::string::npos) meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  c.n_entities = meta_value(meta, "n_entities");
  c.n_relations = meta_value(meta, "n_relations");
  c.visual_dim = meta_value(meta, "visual_dim");
  c.textual_dim = meta_value(meta, "textual_dim");

  auto& s = c.state;
  s = trainer::init_state(c.config.train, c.n_entities, c.n_relations, c.visual_dim, c.textual_dim);
  s.epoch = static_cast<int>(meta_value(meta, "epoch"));
  s.history = parse_history(segs["history"]);
  read_tensor_list(segs["retriever"], "retriever", s.retriever.tensors());
  read_tensor_list(segs["denoiser"], "denoiser", s.denoiser.tensors());
  read_tensor_list(segs["denoiser_ema"], "denoiser_ema", s.denoiser_ema.tensors());
  read_tensor_list(segs["adam_retriever.m"], "adam_retriever.m", moments(s.adam_retriever.first_moment(), s.retriever.tensors()));
  read_tensor_list(segs["adam_retriever.v"], "adam_retriever.v", moments(s.adam_retriever.second_moment(), s.retriever.tensors()));
  read_tensor_list(segs["adam_denoiser.m"], "adam_denoiser.m", moments(s.adam_denoiser.first_moment(), s.denoiser.tensors()));
  read_tensor_list(segs["adam_denoiser.v"], "adam_denoiser.v", moments(s.adam_denoiser.second_moment(), s.denoiser.tensors()));
  s.adam_retriever.set_step_count(meta_value(meta, "adam_retriever.steps"));
  s.adam_denoiser.set_step_count(meta_value(meta, "adam_denoiser.steps"));
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

std::string tensor_digest(const std::vector<ConstNamedTensor>& tensors) {
  Writer w;
  write_tensor_list(w, tensors);
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), w.data().data(), w.data().size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), md, &len) != 1)
    throw std::runtime_error("tensor_digest: SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

}  // namespace radd::ckpt
