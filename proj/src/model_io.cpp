#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "polycert/network.hpp"

namespace polycert {

using nlohmann::json;

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Input: return "input";
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv: return "conv";
    case LayerKind::Relu: return "relu";
    case LayerKind::Join: return "residual_join";
  }
  return "?";
}

namespace {

[[noreturn]] void fail(int layer_id, const std::string& what) {
  throw std::runtime_error("model: layer " + std::to_string(layer_id) + ": " + what);
}

void check_decimal(int layer_id, const std::string& t) {
  try {
    rational_from_decimal(t);
  } catch (const std::exception&) {
    fail(layer_id, "malformed number '" + t + "'");
  }
}

Shape conv_out_shape(const LayerDoc& l, const Shape& in) {
  Shape out;
  out.w = (in.w + 2 * l.pw - l.fw) / l.sw + 1;
  out.h = (in.h + 2 * l.ph - l.fh) / l.sh + 1;
  out.c = l.cout;
  return out;
}

}  // namespace

void validate_model(ModelDoc& doc) {
  if (doc.input_shape.w < 1 || doc.input_shape.h < 1 || doc.input_shape.c < 1)
    throw std::runtime_error("model: input shape must be positive");
  if (doc.layers.empty() || doc.layers[0].kind != LayerKind::Input)
    throw std::runtime_error("model: layer 0 must be the input layer");
  doc.layers[0].out_shape = doc.input_shape;
  if (doc.layers.size() < 2) throw std::runtime_error("model: no layers");

  for (std::size_t i = 1; i < doc.layers.size(); ++i) {
    LayerDoc& l = doc.layers[i];
    if (l.id != static_cast<int>(i)) fail(l.id, "ids must be consecutive");
    // Topological id order made structural: predecessors must already exist.
    // This also rules out cycles.
    std::size_t want_preds = l.kind == LayerKind::Join ? 2 : 1;
    if (l.preds.size() != want_preds)
      fail(l.id, std::string(layer_kind_name(l.kind)) + " needs " +
                     std::to_string(want_preds) + " predecessor(s)");
    for (int p : l.preds)
      if (p < 0 || p >= l.id)
        fail(l.id, "predecessor " + std::to_string(p) +
                       " is not an earlier layer (cyclic or dangling)");

    const Shape in = doc.layers[l.preds[0]].out_shape;
    switch (l.kind) {
      case LayerKind::Input:
        fail(l.id, "only layer 0 may be the input");
      case LayerKind::Dense: {
        const int n_in = in.numel();
        const int n_out = static_cast<int>(l.weights.size());
        if (n_out < 1) fail(l.id, "dense layer has no rows");
        for (const auto& row : l.weights)
          if (static_cast<int>(row.size()) != n_in)
            fail(l.id, "weight row length " + std::to_string(row.size()) +
                           " != predecessor size " + std::to_string(n_in));
        if (static_cast<int>(l.bias.size()) != n_out)
          fail(l.id, "bias length != row count");
        for (const auto& row : l.weights)
          for (const auto& t : row) check_decimal(l.id, t);
        for (const auto& t : l.bias) check_decimal(l.id, t);
        l.out_shape = Shape{1, 1, n_out};
        break;
      }
      case LayerKind::Conv: {
        if (l.fw < 1 || l.fh < 1) fail(l.id, "filter size must be positive");
        if (l.sw < 1 || l.sh < 1) fail(l.id, "stride must be positive");
        if (l.pw < 0 || l.ph < 0) fail(l.id, "negative padding");
        if (l.cin != in.c)
          fail(l.id, "in_channels " + std::to_string(l.cin) +
                         " != predecessor channels " + std::to_string(in.c));
        if (l.cout < 1) fail(l.id, "out_channels must be positive");
        if (static_cast<std::size_t>(l.fw) * l.fh * l.cin * l.cout != l.filter.size())
          fail(l.id, "filter element count mismatch");
        if (static_cast<int>(l.bias.size()) != l.cout)
          fail(l.id, "bias length != out_channels");
        Shape out = conv_out_shape(l, in);
        if (out.w < 1 || out.h < 1)
          fail(l.id, "filter does not fit the input grid");
        if ((in.w + 2 * l.pw - l.fw) % l.sw != 0 || (in.h + 2 * l.ph - l.fh) % l.sh != 0)
          fail(l.id, "stride does not tile the padded input");
        for (const auto& t : l.filter) check_decimal(l.id, t);
        for (const auto& t : l.bias) check_decimal(l.id, t);
        l.out_shape = out;
        break;
      }
      case LayerKind::Relu: {
        const LayerDoc& pred = doc.layers[l.preds[0]];
        if (pred.kind == LayerKind::Relu)
          fail(l.id, "relu fed by relu");
        l.out_shape = in;
        break;
      }
      case LayerKind::Join: {
        const Shape b = doc.layers[l.preds[1]].out_shape;
        if (!(in == b))
          fail(l.id, "branch output shapes differ");
        l.out_shape = in;
        int head = join_head(doc, l.id);
        BranchTrace ta = trace_branch(doc, l.preds[0], head);
        BranchTrace tb = trace_branch(doc, l.preds[1], head);
        if (!ta.dense && !tb.dense &&
            (ta.stride_w != tb.stride_w || ta.stride_h != tb.stride_h))
          fail(l.id, "branches accumulate different strides");
        break;
      }
    }
  }
}

int join_head(const ModelDoc& doc, int join_id) {
  const LayerDoc& j = doc.layers[join_id];
  if (j.kind != LayerKind::Join) fail(join_id, "not a join");
  // Ancestor-or-self sets of both predecessors; the head is the deepest
  // common one. Ids are topological, so a reverse sweep collects ancestors.
  auto ancestors = [&](int start) {
    std::set<int> a;
    std::vector<int> stack{start};
    while (!stack.empty()) {
      int x = stack.back();
      stack.pop_back();
      if (!a.insert(x).second) continue;
      for (int p : doc.layers[x].preds) stack.push_back(p);
    }
    return a;
  };
  std::set<int> aa = ancestors(j.preds[0]);
  std::set<int> ab = ancestors(j.preds[1]);
  int head = -1;
  for (int x : aa)
    if (ab.count(x)) head = std::max(head, x);
  if (head < 0) fail(join_id, "branches share no ancestor");
  return head;
}

BranchTrace trace_branch(const ModelDoc& doc, int from_layer, int head) {
  BranchTrace t;
  int cur = from_layer;
  while (cur != head) {
    const LayerDoc& l = doc.layers[cur];
    switch (l.kind) {
      case LayerKind::Dense:
        t.dense = true;
        cur = l.preds[0];
        break;
      case LayerKind::Conv:
        t.stride_w *= l.sw;
        t.stride_h *= l.sh;
        cur = l.preds[0];
        break;
      case LayerKind::Relu:
        cur = l.preds[0];
        break;
      case LayerKind::Join: {
        int inner_head = join_head(doc, cur);
        BranchTrace inner = trace_branch(doc, l.preds[0], inner_head);
        if (inner.dense) t.dense = true;
        t.stride_w *= inner.stride_w;
        t.stride_h *= inner.stride_h;
        cur = inner_head;
        break;
      }
      case LayerKind::Input:
        fail(from_layer, "branch walked past the input without meeting its head");
    }
  }
  return t;
}

// --- JSON serialization -------------------------------------------------

namespace {

constexpr const char* kFormatTag = "polycert-model-v1";

LayerKind kind_from_string(const std::string& s, int id) {
  if (s == "dense") return LayerKind::Dense;
  if (s == "conv") return LayerKind::Conv;
  if (s == "relu") return LayerKind::Relu;
  if (s == "residual_join") return LayerKind::Join;
  fail(id, "unknown kind '" + s + "'");
}

std::vector<std::string> string_vec(const json& a, int id) {
  if (!a.is_array()) fail(id, "expected an array of decimal strings");
  std::vector<std::string> out;
  out.reserve(a.size());
  for (const auto& v : a) {
    if (!v.is_string()) fail(id, "numbers must be decimal strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

}  // namespace

ModelDoc model_from_json_text(const std::string& text) {
  json j = json::parse(text);
  if (!j.contains("format") || j["format"] != kFormatTag)
    throw std::runtime_error("model: missing or unsupported format tag");
  ModelDoc doc;
  auto is = j.at("input_shape");
  doc.input_shape = Shape{is.at(0).get<int>(), is.at(1).get<int>(), is.at(2).get<int>()};

  LayerDoc input;
  input.id = 0;
  input.kind = LayerKind::Input;
  doc.layers.push_back(input);

  for (const auto& lj : j.at("layers")) {
    LayerDoc l;
    l.id = lj.at("id").get<int>();
    l.kind = kind_from_string(lj.at("kind").get<std::string>(), l.id);
    for (const auto& p : lj.at("predecessors")) l.preds.push_back(p.get<int>());
    if (l.kind == LayerKind::Dense) {
      for (const auto& row : lj.at("weights")) l.weights.push_back(string_vec(row, l.id));
      l.bias = string_vec(lj.at("bias"), l.id);
    } else if (l.kind == LayerKind::Conv) {
      l.fw = lj.at("filter_size").at(0).get<int>();
      l.fh = lj.at("filter_size").at(1).get<int>();
      l.sw = lj.at("stride").at(0).get<int>();
      l.sh = lj.at("stride").at(1).get<int>();
      l.pw = lj.at("padding").at(0).get<int>();
      l.ph = lj.at("padding").at(1).get<int>();
      l.cin = lj.at("in_channels").get<int>();
      l.cout = lj.at("out_channels").get<int>();
      // filter nested [fy][fx][ci][co]
      for (const auto& fy : lj.at("filter"))
        for (const auto& fx : fy)
          for (const auto& ci : fx)
            for (const auto& co : ci) {
              if (!co.is_string()) fail(l.id, "filter numbers must be decimal strings");
              l.filter.push_back(co.get<std::string>());
            }
      l.bias = string_vec(lj.at("bias"), l.id);
    }
    doc.layers.push_back(std::move(l));
  }
  validate_model(doc);
  return doc;
}

std::string model_to_json_text(const ModelDoc& doc) {
  json j;
  j["format"] = kFormatTag;
  j["input_shape"] = {doc.input_shape.w, doc.input_shape.h, doc.input_shape.c};
  json layers = json::array();
  for (std::size_t i = 1; i < doc.layers.size(); ++i) {
    const LayerDoc& l = doc.layers[i];
    json lj;
    lj["id"] = l.id;
    lj["kind"] = layer_kind_name(l.kind);
    lj["predecessors"] = l.preds;
    if (l.kind == LayerKind::Dense) {
      lj["weights"] = l.weights;
      lj["bias"] = l.bias;
    } else if (l.kind == LayerKind::Conv) {
      lj["filter_size"] = {l.fw, l.fh};
      lj["stride"] = {l.sw, l.sh};
      lj["padding"] = {l.pw, l.ph};
      lj["in_channels"] = l.cin;
      lj["out_channels"] = l.cout;
      json f = json::array();
      std::size_t idx = 0;
      for (int fy = 0; fy < l.fh; ++fy) {
        json fyj = json::array();
        for (int fx = 0; fx < l.fw; ++fx) {
          json fxj = json::array();
          for (int ci = 0; ci < l.cin; ++ci) {
            json cij = json::array();
            for (int co = 0; co < l.cout; ++co) cij.push_back(l.filter[idx++]);
            fxj.push_back(std::move(cij));
          }
          fyj.push_back(std::move(fxj));
        }
        f.push_back(std::move(fyj));
      }
      lj["filter"] = std::move(f);
      lj["bias"] = l.bias;
    }
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  return j.dump(1) + "\n";
}

ModelDoc load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open model file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return model_from_json_text(ss.str());
  } catch (const json::exception& e) {
    throw std::runtime_error("model " + path + ": " + e.what());
  }
}

void save_model(const ModelDoc& doc, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write model file: " + path);
  out << model_to_json_text(doc);
}

std::vector<std::vector<std::string>> load_inputs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open inputs file: " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      // tolerate surrounding spaces
      std::size_t b = cell.find_first_not_of(" \t\r");
      std::size_t e = cell.find_last_not_of(" \t\r");
      if (b == std::string::npos)
        throw std::runtime_error("inputs " + path + ": empty cell on line " +
                                 std::to_string(rows.size() + 1));
      row.push_back(cell.substr(b, e - b + 1));
    }
    if (!row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace polycert
