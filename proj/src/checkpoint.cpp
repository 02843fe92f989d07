#include "otformer/checkpoint.hpp"

#include "binary_io.hpp"

#include <cstring>
#include <fstream>
#include <map>

namespace otf {

namespace {

using detail::Reader;
using detail::Writer;

constexpr char kMagic[8] = {'O', 'T', 'F', 'C', 'K', 'P', 'T', '\0'};

void put_config(Writer& w, const ModelConfig& c) {
  w.put(static_cast<std::uint8_t>(c.variant));
  w.put(c.d);
  w.put(c.k);
  w.put(c.heads);
  w.put(c.depth);
  w.put(c.fc_hidden);
  w.put(static_cast<std::uint8_t>(c.token_map));
  w.put(c.input_dim);
  w.put(c.max_tokens);
  w.put(static_cast<std::uint8_t>(c.positional));
  w.put(static_cast<std::uint8_t>(c.pooling));
  w.put(c.classes);
  w.put(static_cast<std::uint8_t>(c.integrator.scheme));
  w.put(static_cast<std::int32_t>(c.integrator.steps));
  w.put(c.integrator.horizon);
}

template <typename E>
E get_enum(Reader& r, int max_value, const char* what) {
  const auto off = r.offset();
  const auto v = r.get<std::uint8_t>();
  if (v > max_value)
    throw FormatError(std::string("invalid ") + what + " tag at byte offset " + std::to_string(off));
  return static_cast<E>(v);
}

ModelConfig get_config(Reader& r) {
  ModelConfig c;
  c.variant = get_enum<Variant>(r, 2, "variant");
  c.d = r.get<std::int64_t>();
  c.k = r.get<std::int64_t>();
  c.heads = r.get<std::int64_t>();
  c.depth = r.get<std::int64_t>();
  c.fc_hidden = r.get<std::int64_t>();
  c.token_map = get_enum<TokenMap>(r, 1, "token map");
  c.input_dim = r.get<std::int64_t>();
  c.max_tokens = r.get<std::int64_t>();
  c.positional = r.get<std::uint8_t>() != 0;
  c.pooling = get_enum<Pooling>(r, 1, "pooling");
  c.classes = r.get<std::int64_t>();
  c.integrator.scheme = get_enum<Scheme>(r, 1, "scheme");
  c.integrator.steps = r.get<std::int32_t>();
  c.integrator.horizon = r.get<double>();
  return c;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

CheckpointHeader read_header(Reader& r) {
  char magic[8];
  r.get_raw(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw FormatError("bad checkpoint magic at byte offset 0");
  CheckpointHeader h;
  h.version = r.get<std::uint32_t>();
  if (h.version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(h.version));
  h.precision = get_enum<Precision>(r, 1, "precision");
  h.config = get_config(r);
  h.config_echo = r.get_string();
  return h;
}

}  // namespace

std::string to_string(Precision p) { return p == Precision::F64 ? "f64" : "f32"; }

Precision parse_precision(const std::string& name) {
  if (name == "f32") return Precision::F32;
  if (name == "f64") return Precision::F64;
  throw std::invalid_argument("unknown precision '" + name + "' (expected f32|f64)");
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, Model<T>& model,
                     const std::string& config_echo) {
  Writer w;
  w.put_raw(kMagic, 8);
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint8_t>(precision_of<T>()));
  put_config(w, model.config());
  w.put_string(config_echo);
  std::uint32_t count = 0;
  model.visit_parameters([&](const std::string&, Tensor<T>&) { ++count; });
  w.put(count);
  model.visit_parameters([&](const std::string& name, Tensor<T>& t) {
    w.put_string(name);
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) w.put(e);
    for (T v : t.data()) w.put(v);
  });
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  Reader r(slurp(path));
  return read_header(r);
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path, std::string* config_echo) {
  Reader r(slurp(path));
  const CheckpointHeader h = read_header(r);
  if (h.precision != precision_of<T>())
    throw FormatError("checkpoint holds " + to_string(h.precision) + " weights, requested " +
                      to_string(precision_of<T>()));
  const auto count = r.get<std::uint32_t>();
  std::map<std::string, std::pair<Shape, std::vector<T>>> stored;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8)
      throw FormatError("implausible rank for '" + name + "' at byte offset " +
                        std::to_string(r.offset()));
    Shape shape(rank);
    for (auto& e : shape) {
      e = r.get<std::int64_t>();
      if (e <= 0) throw FormatError("non-positive extent for '" + name + "'");
    }
    std::vector<T> values(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : values) v = r.get<T>();
    stored.emplace(std::move(name), std::make_pair(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw FormatError("trailing bytes at offset " + std::to_string(r.offset()));

  Model<T> model = Model<T>::initialise(h.config, 0);
  std::size_t used = 0;
  model.visit_parameters([&](const std::string& name, Tensor<T>& t) {
    auto it = stored.find(name);
    if (it == stored.end()) throw FormatError("checkpoint is missing parameter '" + name + "'");
    if (it->second.first != t.shape())
      throw FormatError("parameter '" + name + "' has shape " + shape_str(it->second.first) +
                        ", model expects " + shape_str(t.shape()));
    std::copy(it->second.second.begin(), it->second.second.end(), t.mutable_data().begin());
    ++used;
  });
  if (used != stored.size()) throw FormatError("checkpoint has unexpected extra parameters");
  if (config_echo) *config_echo = h.config_echo;
  return model;
}

template void save_checkpoint(const std::filesystem::path&, Model<float>&, const std::string&);
template void save_checkpoint(const std::filesystem::path&, Model<double>&, const std::string&);
template Model<float> load_checkpoint(const std::filesystem::path&, std::string*);
template Model<double> load_checkpoint(const std::filesystem::path&, std::string*);

}  // namespace otf
