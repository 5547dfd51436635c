#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "lraccel/common.hpp"
#include "lraccel/tensor.hpp"

namespace lraccel {

namespace fs = std::filesystem;
using nlohmann::json;

// all binary formats are little-endian; this implementation targets LE hosts

namespace detail {

template <typename T>
void write_raw(std::ostream& os, const T& value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is, const std::string& context) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw InputError(context + ": truncated file");
  return value;
}

}  // namespace detail

// ---------------------------------------------------------------- tensor blob
//
//   magic "LRTB" | version u32 | rank u32 | dims u32[rank] | payload f32[]
//
// payload is row-major over dims

constexpr std::uint32_t kBlobVersion = 1;

struct Blob {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  std::uint64_t count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return dims.empty() ? 0 : n;
  }
};

inline void write_blob(std::ostream& os, const Blob& blob) {
  os.write("LRTB", 4);
  detail::write_raw(os, kBlobVersion);
  detail::write_raw(os, static_cast<std::uint32_t>(blob.dims.size()));
  for (auto d : blob.dims) detail::write_raw(os, d);
  os.write(reinterpret_cast<const char*>(blob.data.data()),
           sizeof(float) * blob.data.size());
  if (!os) throw InputError("tensor blob: write failed");
}

inline Blob read_blob(std::istream& is, const std::string& context) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "LRTB", 4) != 0)
    throw InputError(context + ": not a tensor blob (bad magic)");
  auto version = detail::read_raw<std::uint32_t>(is, context);
  if (version > kBlobVersion)
    throw InputError(context + ": blob version " + std::to_string(version) +
                     " is newer than this reader (" + std::to_string(kBlobVersion) + ")");
  auto rank = detail::read_raw<std::uint32_t>(is, context);
  if (rank > 8) throw InputError(context + ": implausible blob rank");
  Blob blob;
  blob.dims.resize(rank);
  for (auto& d : blob.dims) d = detail::read_raw<std::uint32_t>(is, context);
  const std::uint64_t n = blob.count();
  blob.data.resize(n);
  is.read(reinterpret_cast<char*>(blob.data.data()), sizeof(float) * n);
  const std::uint64_t got = std::uint64_t(is.gcount()) / sizeof(float);
  if (std::uint64_t(is.gcount()) != sizeof(float) * n)
    throw InputError(context + ": payload holds " + std::to_string(got) +
                     " values, dims require " + std::to_string(n));
  return blob;
}

inline void save_blob_file(const fs::path& path, const Blob& blob) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path.string());
  write_blob(os, blob);
}

inline Blob load_blob_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot read " + path.string());
  return read_blob(is, path.string());
}

inline Blob to_blob(const FeatureMap& fm) {
  Blob b;
  b.dims = {std::uint32_t(fm.channels), std::uint32_t(fm.height), std::uint32_t(fm.width)};
  b.data = fm.data;
  return b;
}

inline FeatureMap feature_map_from_blob(const Blob& b, const std::string& context) {
  if (b.dims.size() != 3) throw InputError(context + ": expected a rank-3 blob");
  FeatureMap fm(int(b.dims[0]), int(b.dims[1]), int(b.dims[2]));
  fm.data = b.data;
  return fm;
}

inline Blob to_blob(const MatF& m) {
  Blob b;
  b.dims = {std::uint32_t(m.rows()), std::uint32_t(m.cols())};
  b.data.resize(std::size_t(m.rows()) * m.cols());
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) b.data[std::size_t(r) * m.cols() + c] = m(r, c);
  return b;
}

inline MatF matrix_from_blob(const Blob& b, const std::string& context) {
  if (b.dims.size() != 2) throw InputError(context + ": expected a rank-2 blob");
  MatF m(int(b.dims[0]), int(b.dims[1]));
  for (std::uint32_t r = 0; r < b.dims[0]; ++r)
    for (std::uint32_t c = 0; c < b.dims[1]; ++c)
      m(r, c) = b.data[std::size_t(r) * b.dims[1] + c];
  return m;
}

// ---------------------------------------------------------------- json files

inline void write_json_file(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

inline json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- model

constexpr std::uint32_t kModelVersion = 1;

inline std::string nonlinearity_name(Nonlinearity nl) {
  return nl == Nonlinearity::relu ? "relu" : "identity";
}

inline Nonlinearity nonlinearity_from_name(const std::string& s, const std::string& ctx) {
  if (s == "relu") return Nonlinearity::relu;
  if (s == "identity") return Nonlinearity::identity;
  throw InputError(ctx + ": unknown nonlinearity '" + s + "'");
}

// a model is a directory: model.json describing the layer stack plus one
// weight blob per parameterized layer under blobs/
inline void save_model(const Net& net, const fs::path& dir) {
  fs::create_directories(dir / "blobs");
  json layers = json::array();
  for (const auto& layer : net.layers) {
    json j;
    if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      j["type"] = "conv";
      j["name"] = c->name;
      j["kh"] = c->kh;
      j["kw"] = c->kw;
      j["in_channels"] = c->in_channels;
      j["out_channels"] = c->out_channels;
      j["stride_h"] = c->stride_h;
      j["stride_w"] = c->stride_w;
      j["pad_h"] = c->pad_h;
      j["pad_w"] = c->pad_w;
      j["nonlinearity"] = nonlinearity_name(c->nonlinearity);
      std::string rel = "blobs/" + c->name + ".lrtb";
      j["weights"] = rel;
      save_blob_file(dir / rel, to_blob(c->weights));
    } else if (const auto* p = std::get_if<PoolLayer>(&layer)) {
      j["type"] = "pool";
      j["name"] = p->name;
      j["window"] = p->window;
      j["stride"] = p->stride;
      j["mode"] = "max";
    } else if (const auto* f = std::get_if<FlattenLayer>(&layer)) {
      j["type"] = "flatten";
      j["name"] = f->name;
    } else if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      j["type"] = "dense";
      j["name"] = d->name;
      j["nonlinearity"] = nonlinearity_name(d->nonlinearity);
      std::string wrel = "blobs/" + d->name + ".w.lrtb";
      std::string brel = "blobs/" + d->name + ".b.lrtb";
      j["weights"] = wrel;
      j["bias"] = brel;
      save_blob_file(dir / wrel, to_blob(d->weights));
      MatF bias(d->bias.size(), 1);
      bias.col(0) = d->bias;
      save_blob_file(dir / brel, to_blob(bias));
    }
    layers.push_back(j);
  }
  json root;
  root["format"] = "lraccel-model";
  root["version"] = kModelVersion;
  root["layers"] = layers;
  write_json_file(dir / "model.json", root);
}

inline Net load_model(const fs::path& path) {
  fs::path jpath = fs::is_directory(path) ? path / "model.json" : path;
  fs::path dir = jpath.parent_path();
  json root = read_json_file(jpath);
  if (root.value("format", "") != "lraccel-model")
    throw InputError(jpath.string() + ": not a model descriptor");
  if (root.value("version", 0) > int(kModelVersion))
    throw InputError(jpath.string() + ": model version is newer than this reader");

  auto load_weight = [&](const json& j, const char* key) {
    std::string rel = j.at(key).get<std::string>();
    fs::path p = dir / rel;
    if (!fs::exists(p))
      throw InputError("model references missing blob " + p.string());
    return load_blob_file(p);
  };

  Net net;
  for (const auto& j : root.at("layers")) {
    const std::string type = j.at("type").get<std::string>();
    const std::string name = j.at("name").get<std::string>();
    if (type == "conv") {
      ConvLayer c;
      c.name = name;
      c.kh = j.at("kh").get<int>();
      c.kw = j.at("kw").get<int>();
      c.in_channels = j.at("in_channels").get<int>();
      c.out_channels = j.at("out_channels").get<int>();
      c.stride_h = j.at("stride_h").get<int>();
      c.stride_w = j.at("stride_w").get<int>();
      c.pad_h = j.at("pad_h").get<int>();
      c.pad_w = j.at("pad_w").get<int>();
      c.nonlinearity = nonlinearity_from_name(j.at("nonlinearity").get<std::string>(), name);
      c.weights = matrix_from_blob(load_weight(j, "weights"), name);
      if (c.weights.rows() != c.out_channels || c.weights.cols() != c.patch_len())
        throw InputError("conv '" + name + "': blob shape does not match descriptor");
      net.layers.push_back(c);
    } else if (type == "pool") {
      PoolLayer p;
      p.name = name;
      p.window = j.at("window").get<int>();
      p.stride = j.at("stride").get<int>();
      if (j.value("mode", "max") != "max")
        throw InputError("pool '" + name + "': only max pooling is supported");
      net.layers.push_back(p);
    } else if (type == "flatten") {
      net.layers.push_back(FlattenLayer{name});
    } else if (type == "dense") {
      DenseLayer d;
      d.name = name;
      d.nonlinearity = nonlinearity_from_name(j.at("nonlinearity").get<std::string>(), name);
      d.weights = matrix_from_blob(load_weight(j, "weights"), name);
      MatF bias = matrix_from_blob(load_weight(j, "bias"), name);
      d.bias = bias.col(0);
      net.layers.push_back(d);
    } else {
      throw InputError(jpath.string() + ": unknown layer type '" + type + "'");
    }
  }
  return net;
}

// ---------------------------------------------------------------- dataset
//
// a dataset is a directory with an index.txt naming one rank-3 tensor blob
// per image, one relative path per line

struct Dataset {
  fs::path dir;
  std::vector<std::string> files;

  int count() const { return int(files.size()); }
};

inline Dataset open_dataset(const fs::path& dir) {
  std::ifstream is(dir / "index.txt");
  if (!is) throw InputError("dataset " + dir.string() + ": missing index.txt");
  Dataset ds;
  ds.dir = dir;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) ds.files.push_back(line);
  }
  if (ds.files.empty()) throw InputError("dataset " + dir.string() + ": index is empty");
  return ds;
}

inline FeatureMap load_image(const Dataset& ds, int i) {
  require(i >= 0 && i < ds.count(), "dataset image index out of range");
  fs::path p = ds.dir / ds.files[i];
  return feature_map_from_blob(load_blob_file(p), p.string());
}

inline void save_dataset(const fs::path& dir, const std::vector<FeatureMap>& images) {
  require(!images.empty(), "save_dataset: no images");
  fs::create_directories(dir);
  std::ofstream index(dir / "index.txt");
  if (!index) throw InputError("cannot write " + (dir / "index.txt").string());
  for (std::size_t i = 0; i < images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img%05zu.lrtb", i);
    save_blob_file(dir / name, to_blob(images[i]));
    index << name << "\n";
  }
}

}  // namespace lraccel
