#include "awmlab/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "awmlab/util.hpp"

namespace awmlab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; byte-swapping is not implemented");

int ParamStore::add(std::string name, Array init) {
  for (const Entry& e : entries_)
    if (e.name == name) throw std::invalid_argument("duplicate parameter name " + name);
  entries_.push_back(Entry{std::move(name), std::move(init), {}, {}});
  return static_cast<int>(entries_.size()) - 1;
}

int64_t ParamStore::total_params() const {
  int64_t n = 0;
  for (const Entry& e : entries_) n += e.value.numel();
  return n;
}

std::vector<Value> ParamStore::bind(Tape& t) const {
  std::vector<Value> out;
  out.reserve(entries_.size());
  for (const Entry& e : entries_) out.push_back(t.leaf(e.value));
  return out;
}

std::vector<Value> ParamStore::bind_frozen() const {
  std::vector<Value> out;
  out.reserve(entries_.size());
  for (const Entry& e : entries_) out.push_back(Tape::constant(e.value));
  return out;
}

std::vector<Array> ParamStore::grads_of(const Gradients& g,
                                        const std::vector<Value>& bound) const {
  if (bound.size() != entries_.size())
    throw std::invalid_argument("bound parameter list does not match store");
  std::vector<Array> out;
  out.reserve(bound.size());
  for (const Value& v : bound) out.push_back(g.wrt(v));
  return out;
}

void ParamStore::save(const std::string& prefix, const CheckpointHeader& header) const {
  nlohmann::json manifest;
  manifest["dtype"] = "f64-le";
  manifest["header"] = {{"family", header.family},
                        {"backbone", header.backbone},
                        {"state_dim", header.state_dim},
                        {"action_dim", header.action_dim},
                        {"horizon", header.horizon}};
  nlohmann::json params = nlohmann::json::array();
  int64_t off = 0;
  std::string blob;
  for (const Entry& e : entries_) {
    params.push_back({{"name", e.name}, {"shape", e.value.shape}, {"offset", off}});
    const char* bytes = reinterpret_cast<const char*>(e.value.data.data());
    blob.append(bytes, e.value.data.size() * sizeof(double));
    off += e.value.numel();
  }
  manifest["params"] = params;
  manifest["total"] = off;
  write_text_file(prefix + ".json", manifest.dump(2) + "\n");
  write_text_file(prefix + ".f64", blob);
}

CheckpointHeader ParamStore::load(const std::string& prefix) {
  const nlohmann::json manifest = nlohmann::json::parse(read_text_file(prefix + ".json"));
  if (manifest.at("dtype").get<std::string>() != "f64-le")
    throw std::runtime_error(prefix + ".json: unsupported dtype");
  const auto& params = manifest.at("params");
  if (params.size() != entries_.size())
    throw std::runtime_error(prefix + ".json: manifest has " + std::to_string(params.size()) +
                             " entries, store has " + std::to_string(entries_.size()));

  const std::string blob = read_text_file(prefix + ".f64");
  const int64_t total = manifest.at("total").get<int64_t>();
  if (static_cast<int64_t>(blob.size()) != total * static_cast<int64_t>(sizeof(double)))
    throw std::runtime_error(prefix + ".f64: expected " + std::to_string(total) +
                             " doubles, file has " + std::to_string(blob.size()) + " bytes");

  for (size_t i = 0; i < entries_.size(); ++i) {
    Entry& e = entries_[i];
    const auto& p = params[i];
    if (p.at("name").get<std::string>() != e.name)
      throw std::runtime_error(prefix + ": parameter order mismatch at " + e.name);
    const Shape shape = p.at("shape").get<Shape>();
    if (!shape_eq(shape, e.value.shape))
      throw std::runtime_error(prefix + ": shape mismatch for " + e.name + ": " +
                               shape_str(shape) + " vs " + shape_str(e.value.shape));
    const int64_t off = p.at("offset").get<int64_t>();
    if (off < 0 || off + e.value.numel() > total)
      throw std::runtime_error(prefix + ": offset out of range for " + e.name);
    std::memcpy(e.value.data.data(), blob.data() + off * sizeof(double),
                e.value.data.size() * sizeof(double));
  }

  CheckpointHeader h;
  const auto& jh = manifest.at("header");
  h.family = jh.at("family").get<std::string>();
  h.backbone = jh.at("backbone").get<std::string>();
  h.state_dim = jh.at("state_dim").get<int>();
  h.action_dim = jh.at("action_dim").get<int>();
  h.horizon = jh.at("horizon").get<int>();
  return h;
}

double global_norm(const std::vector<Array>& grads) {
  double s = 0.0;
  for (const Array& g : grads)
    for (double x : g.data) s += x * x;
  return std::sqrt(s);
}

GradNorms Adam::step(ParamStore& store, std::vector<Array> grads, double clip) {
  if (grads.size() != store.entries_.size())
    throw std::invalid_argument("adam: gradient list does not match store");
  GradNorms norms;
  norms.pre_clip = global_norm(grads);
  if (clip > 0.0 && norms.pre_clip > clip) {
    const double s = clip / norms.pre_clip;
    for (Array& g : grads) g *= s;
    norms.clipped = true;
  }
  norms.post_clip = norms.clipped ? clip : norms.pre_clip;

  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < grads.size(); ++i) {
    ParamStore::Entry& e = store.entries_[i];
    const Array& g = grads[i];
    if (!shape_eq(g.shape, e.value.shape))
      throw std::invalid_argument("adam: gradient shape " + shape_str(g.shape) +
                                  " does not match " + e.name + " " + shape_str(e.value.shape));
    if (e.m.numel() != e.value.numel()) {
      e.m = Array(e.value.shape);
      e.v = Array(e.value.shape);
    }
    for (int64_t k = 0; k < g.numel(); ++k) {
      e.m.at(k) = beta1_ * e.m.at(k) + (1.0 - beta1_) * g.at(k);
      e.v.at(k) = beta2_ * e.v.at(k) + (1.0 - beta2_) * g.at(k) * g.at(k);
      const double mhat = e.m.at(k) / bc1;
      const double vhat = e.v.at(k) / bc2;
      e.value.at(k) -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
  return norms;
}

}  // namespace awmlab
