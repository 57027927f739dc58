// Checkpoint layout:
//
//   format = htlab-checkpoint
//   version = 1
//   layer_widths = 16,64,64,10
//   activation = relu
//   use_batchnorm = 0|1
//   use_in_adapter = 0|1
//   bn_eps = <17 significant digits>
//   bn_momentum = <17 significant digits>
//   parameter_count = <total doubles>
//   tensor <name> <offset> <length>      (one line per tensor, canonical order)
//   end_header
//   <parameter_count little-endian f64>

#include "detail/binary_io.hpp"
#include "htlab/model.hpp"

#include <fstream>
#include <map>
#include <sstream>

namespace htlab {

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  params.validate();
  const auto& spec = params.spec;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "format = htlab-checkpoint\n"
      << "version = 1\n"
      << "layer_widths = " << detail::join_indices(spec.layer_widths) << "\n"
      << "activation = " << to_string(spec.activation) << "\n"
      << "use_batchnorm = " << (spec.use_batchnorm ? 1 : 0) << "\n"
      << "use_in_adapter = " << (spec.use_in_adapter ? 1 : 0) << "\n"
      << "bn_eps = " << detail::fmt_double(spec.bn_eps) << "\n"
      << "bn_momentum = " << detail::fmt_double(spec.bn_momentum) << "\n"
      << "parameter_count = " << params.parameter_count() << "\n";
  std::size_t offset = 0;
  for (const auto& t : params.tensors()) {
    out << "tensor " << t.name << " " << offset << " " << t.values.size() << "\n";
    offset += t.values.size();
  }
  out << "end_header\n";
  for (const auto& t : params.tensors())
    for (double v : t.values) detail::put_f64_le(out, v);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::map<std::string, std::string> kv;
  std::vector<std::tuple<std::string, std::size_t, std::size_t>> entries;
  std::string line;
  bool closed = false;
  while (std::getline(in, line)) {
    if (line == "end_header") {
      closed = true;
      break;
    }
    if (line.rfind("tensor ", 0) == 0) {
      std::istringstream ls(line.substr(7));
      std::string name;
      std::size_t off = 0, len = 0;
      if (!(ls >> name >> off >> len)) throw ValidationError("bad tensor line in " + path.string());
      entries.emplace_back(name, off, len);
      continue;
    }
    auto eq = line.find(" = ");
    if (eq == std::string::npos) throw ValidationError("bad checkpoint header line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  if (!closed || kv["format"] != "htlab-checkpoint" || kv["version"] != "1")
    throw ValidationError("not an htlab checkpoint: " + path.string());

  MlpSpec spec;
  try {
    spec.layer_widths = detail::parse_indices(kv.at("layer_widths"));
    spec.activation = parse_activation(kv.at("activation"));
    spec.use_batchnorm = kv.at("use_batchnorm") == "1";
    spec.use_in_adapter = kv.at("use_in_adapter") == "1";
    spec.bn_eps = std::stod(kv.at("bn_eps"));
    spec.bn_momentum = std::stod(kv.at("bn_momentum"));
  } catch (const std::out_of_range&) {
    throw ValidationError("checkpoint header incomplete: " + path.string());
  }
  spec.validate();

  // Build a correctly shaped model, then check the header agrees with it.
  Rng dummy(0);
  ModelParams p = init_model(spec, dummy);
  auto tensors = p.tensors();
  if (std::stoull(kv.at("parameter_count")) != p.parameter_count() ||
      entries.size() != tensors.size())
    throw ValidationError("checkpoint layout does not match its spec: " + path.string());
  std::size_t offset = 0;
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const auto& [name, off, len] = entries[t];
    if (name != tensors[t].name || off != offset || len != tensors[t].values.size())
      throw ValidationError("checkpoint tensor '" + name + "' does not match its spec");
    offset += len;
  }
  for (auto& t : tensors)
    for (double& v : t.values) v = detail::get_f64_le(in);
  if (in.peek() != std::char_traits<char>::eof())
    throw ValidationError("trailing bytes in checkpoint " + path.string());
  p.validate();
  return p;
}

}  // namespace htlab
