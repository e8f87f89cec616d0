#include "fsa/model.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace fsa {

namespace {

std::string fmt_float(float v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, p);
}

std::string fmt_int_list(const std::vector<int>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(v[i]);
    }
    return s;
}

std::string fmt_anchor_list(const std::array<float, 6>& a) {
    std::string s;
    for (size_t i = 0; i < a.size(); ++i) {
        if (i) s += ',';
        s += fmt_float(a[i]);
    }
    return s;
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(trim(cur));
    return out;
}

int parse_int(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
}

float parse_float(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        float r = std::stof(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& v, const std::string& key) {
    std::vector<int> out;
    for (const std::string& p : split_csv(v)) out.push_back(parse_int(p, key));
    return out;
}

std::array<float, 6> parse_anchor_list(const std::string& v, const std::string& key) {
    std::vector<std::string> parts = split_csv(v);
    if (parts.size() != 6)
        throw ConfigError(key + ": expected 6 comma-separated values (3 w,h pairs), got " +
                          std::to_string(parts.size()));
    std::array<float, 6> out{};
    for (size_t i = 0; i < 6; ++i) out[i] = parse_float(parts[i], key);
    return out;
}

constexpr std::array<const char*, 4> kAnchorKeys = {"anchors_p2", "anchors_p3", "anchors_p4",
                                                    "anchors_p5"};

} // namespace

ModelConfig::ModelConfig() {
    // defaults sized for 160px synthetic scenes; train-time k-means replaces them
    anchors = {{{4, 4, 8, 6, 6, 10},
                {12, 10, 16, 16, 12, 22},
                {24, 20, 32, 32, 26, 44},
                {44, 36, 56, 52, 64, 64}}};
}

std::vector<int> ModelConfig::strides() const {
    return use_p2_head ? std::vector<int>{4, 8, 16, 32} : std::vector<int>{8, 16, 32};
}

std::vector<HeadSpec> ModelConfig::head_specs() const {
    const std::vector<int> s = strides();
    std::vector<HeadSpec> out(s.size());
    for (size_t i = 0; i < s.size(); ++i) {
        out[i].stride = s[i];
        for (int a = 0; a < 3; ++a) {
            out[i].anchors[static_cast<size_t>(a)][0] = anchors[i][static_cast<size_t>(2 * a)];
            out[i].anchors[static_cast<size_t>(a)][1] = anchors[i][static_cast<size_t>(2 * a + 1)];
        }
    }
    return out;
}

void ModelConfig::validate() const {
    if (input_size < 32 || input_size % 32 != 0)
        throw ConfigError("input_size: must be a positive multiple of 32, got " +
                          std::to_string(input_size));
    if (widths.size() != 5) throw ConfigError("widths: expected 5 entries (stem,p2,p3,p4,p5)");
    for (int w : widths)
        if (w < 2 || w % 2 != 0) throw ConfigError("widths: entries must be positive and even");
    if (depths.size() != 4) throw ConfigError("depths: expected 4 entries (p2..p5)");
    for (int d : depths)
        if (d < 0) throw ConfigError("depths: entries must be >= 0");
    if (num_classes < 1) throw ConfigError("num_classes: must be >= 1");
    if (fsa_r < 1) throw ConfigError("fsa_r: must be >= 1");
    if (fsa_k < 1 || fsa_k % 2 == 0) throw ConfigError("fsa_k: must be odd and >= 1");
    if (use_fsa) {
        // widths seen by the FSA sites
        const std::vector<int> site = use_p2_head
                                          ? std::vector<int>{widths[1], widths[2], widths[3], widths[4]}
                                          : std::vector<int>{widths[2], widths[3], widths[4]};
        for (int c : site)
            if (c % fsa_r != 0)
                throw ConfigError("fsa_r: neck width " + std::to_string(c) +
                                  " not divisible by reduction ratio " + std::to_string(fsa_r));
    }
    if (use_mhsa) {
        if (mhsa_heads < 1 || (widths[4] / 2) % mhsa_heads != 0)
            throw ConfigError("mhsa_heads: deepest stage embedding " + std::to_string(widths[4] / 2) +
                              " not divisible by " + std::to_string(mhsa_heads));
    }
    if (static_cast<int>(anchors.size()) != num_heads())
        throw ConfigError("anchors: expected " + std::to_string(num_heads()) +
                          " anchor sets, got " + std::to_string(anchors.size()));
    for (const auto& set : anchors)
        for (float v : set)
            if (!(v > 0.0f)) throw ConfigError("anchors: anchor extents must be strictly positive");
}

std::string ModelConfig::to_text() const {
    std::ostringstream os;
    os << "input_size = " << input_size << '\n';
    os << "num_classes = " << num_classes << '\n';
    os << "widths = " << fmt_int_list(widths) << '\n';
    os << "depths = " << fmt_int_list(depths) << '\n';
    os << "use_fsa = " << (use_fsa ? "true" : "false") << '\n';
    os << "use_mhsa = " << (use_mhsa ? "true" : "false") << '\n';
    os << "use_p2_head = " << (use_p2_head ? "true" : "false") << '\n';
    os << "mhsa_heads = " << mhsa_heads << '\n';
    os << "fsa_r = " << fsa_r << '\n';
    os << "fsa_k = " << fsa_k << '\n';
    const int first = use_p2_head ? 0 : 1;
    for (size_t i = 0; i < anchors.size(); ++i)
        os << kAnchorKeys[static_cast<size_t>(first) + i] << " = " << fmt_anchor_list(anchors[i])
           << '\n';
    return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
    ModelConfig cfg;
    cfg.anchors.clear();
    std::array<std::optional<std::array<float, 6>>, 4> anchor_slots;
    bool anchors_default = true;

    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected 'key = value', got '" + t + "'");
        const std::string key = trim(t.substr(0, eq));
        const std::string val = trim(t.substr(eq + 1));
        if (key == "input_size")
            cfg.input_size = parse_int(val, key);
        else if (key == "num_classes")
            cfg.num_classes = parse_int(val, key);
        else if (key == "widths")
            cfg.widths = parse_int_list(val, key);
        else if (key == "depths")
            cfg.depths = parse_int_list(val, key);
        else if (key == "use_fsa")
            cfg.use_fsa = parse_bool(val, key);
        else if (key == "use_mhsa")
            cfg.use_mhsa = parse_bool(val, key);
        else if (key == "use_p2_head")
            cfg.use_p2_head = parse_bool(val, key);
        else if (key == "mhsa_heads")
            cfg.mhsa_heads = parse_int(val, key);
        else if (key == "fsa_r")
            cfg.fsa_r = parse_int(val, key);
        else if (key == "fsa_k")
            cfg.fsa_k = parse_int(val, key);
        else if (key == "anchors" && val == "auto")
            anchors_default = true; // resolved later from training labels
        else {
            bool matched = false;
            for (size_t i = 0; i < kAnchorKeys.size(); ++i) {
                if (key == kAnchorKeys[i]) {
                    anchor_slots[i] = parse_anchor_list(val, key);
                    anchors_default = false;
                    matched = true;
                    break;
                }
            }
            if (!matched) throw ConfigError("config: unknown key '" + key + "'");
        }
    }

    if (anchors_default) {
        cfg.anchors = ModelConfig().anchors;
        if (!cfg.use_p2_head) cfg.anchors.erase(cfg.anchors.begin());
    } else {
        const int first = cfg.use_p2_head ? 0 : 1;
        for (int i = 0; i < cfg.num_heads(); ++i) {
            const auto& slot = anchor_slots[static_cast<size_t>(first + i)];
            if (!slot)
                throw ConfigError(std::string("anchors: missing ") + kAnchorKeys[static_cast<size_t>(first + i)]);
            cfg.anchors.push_back(*slot);
        }
    }
    cfg.validate();
    return cfg;
}

ModelConfig ModelConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
}

uint64_t ModelConfig::hash() const {
    const std::string text = to_text();
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::vector<std::array<float, 6>> kmeans_anchors(const std::vector<GroundTruthBox>& boxes,
                                                 int num_heads) {
    if (boxes.empty()) throw ContractError("kmeans_anchors: no labels");
    const int k = 3 * num_heads;
    struct P {
        float lw, lh, area;
    };
    std::vector<P> pts;
    pts.reserve(boxes.size());
    for (const GroundTruthBox& b : boxes) {
        const float w = std::max(b.w, 1.0f);
        const float h = std::max(b.h, 1.0f);
        pts.push_back({std::log(w), std::log(h), w * h});
    }
    std::sort(pts.begin(), pts.end(), [](const P& a, const P& b) {
        if (a.area != b.area) return a.area < b.area;
        return a.lw < b.lw;
    });
    // quantile init over the area-sorted points
    std::vector<std::array<float, 2>> centers(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        const size_t at = std::min(pts.size() - 1,
                                   static_cast<size_t>((i + 0.5) * static_cast<double>(pts.size()) / k));
        centers[static_cast<size_t>(i)] = {pts[at].lw, pts[at].lh};
    }
    std::vector<int> assign(pts.size(), 0);
    for (int iter = 0; iter < 50; ++iter) {
        for (size_t p = 0; p < pts.size(); ++p) {
            float best = 1e30f;
            int bi = 0;
            for (int c = 0; c < k; ++c) {
                const float dx = pts[p].lw - centers[static_cast<size_t>(c)][0];
                const float dy = pts[p].lh - centers[static_cast<size_t>(c)][1];
                const float d = dx * dx + dy * dy;
                if (d < best) {
                    best = d;
                    bi = c;
                }
            }
            assign[p] = bi;
        }
        for (int c = 0; c < k; ++c) {
            double sw = 0, sh = 0;
            int n = 0;
            for (size_t p = 0; p < pts.size(); ++p) {
                if (assign[p] != c) continue;
                sw += pts[p].lw;
                sh += pts[p].lh;
                ++n;
            }
            if (n > 0)
                centers[static_cast<size_t>(c)] = {static_cast<float>(sw / n),
                                                   static_cast<float>(sh / n)};
        }
    }
    std::vector<std::array<float, 2>> wh(static_cast<size_t>(k));
    for (int c = 0; c < k; ++c)
        wh[static_cast<size_t>(c)] = {std::exp(centers[static_cast<size_t>(c)][0]),
                                      std::exp(centers[static_cast<size_t>(c)][1])};
    std::sort(wh.begin(), wh.end(), [](const auto& a, const auto& b) {
        return a[0] * a[1] < b[0] * b[1];
    });
    std::vector<std::array<float, 6>> out(static_cast<size_t>(num_heads));
    for (int hI = 0; hI < num_heads; ++hI)
        for (int a = 0; a < 3; ++a) {
            out[static_cast<size_t>(hI)][static_cast<size_t>(2 * a)] = wh[static_cast<size_t>(3 * hI + a)][0];
            out[static_cast<size_t>(hI)][static_cast<size_t>(2 * a + 1)] = wh[static_cast<size_t>(3 * hI + a)][1];
        }
    return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model Model::build(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg_ = cfg;
    m.wire(seed);
    return m;
}

void Model::wire(uint64_t seed) {
    Rng rng(mix_seed(seed, 0x0f5a));
    const auto& w = cfg_.widths;
    const bool p2 = cfg_.use_p2_head;
    const int hc = cfg_.head_channels();

    stem_ = ConvBlock(3, w[0], 3, 2, rng);
    d2_ = ConvBlock(w[0], w[1], 3, 2, rng);
    c2_ = CspStage(w[1], w[1], cfg_.depths[0], true, rng);
    d3_ = ConvBlock(w[1], w[2], 3, 2, rng);
    c3_ = CspStage(w[2], w[2], cfg_.depths[1], true, rng);
    d4_ = ConvBlock(w[2], w[3], 3, 2, rng);
    c4_ = CspStage(w[3], w[3], cfg_.depths[2], true, rng);
    d5_ = ConvBlock(w[3], w[4], 3, 2, rng);
    c5_ = CspStage(w[4], w[4], cfg_.depths[3], true, rng, cfg_.use_mhsa ? cfg_.mhsa_heads : 0);
    sppf_ = Sppf(w[4], w[4], rng);

    lat5_ = ConvBlock(w[4], w[3], 1, 1, rng);
    t4_ = CspStage(2 * w[3], w[3], 1, false, rng);
    lat4_ = ConvBlock(w[3], w[2], 1, 1, rng);
    t3_ = CspStage(2 * w[2], w[2], 1, false, rng);
    if (p2) {
        lat3_ = ConvBlock(w[2], w[1], 1, 1, rng);
        t2_ = CspStage(2 * w[1], w[1], 1, false, rng);
        pan2_ = ConvBlock(w[1], w[1], 3, 2, rng);
        n3_ = CspStage(2 * w[1], w[2], 1, false, rng);
    }
    pan3_ = ConvBlock(w[2], w[2], 3, 2, rng);
    n4_ = CspStage(2 * w[2], w[3], 1, false, rng);
    pan4_ = ConvBlock(w[3], w[3], 3, 2, rng);
    n5_ = CspStage(2 * w[3], w[4], 1, false, rng);

    const std::vector<int> strides = cfg_.strides();
    std::vector<int> site_ch = p2 ? std::vector<int>{w[1], w[2], w[3], w[4]}
                                  : std::vector<int>{w[2], w[3], w[4]};
    // heads draw before the FSA gates so toggling use_fsa keeps every shared
    // parameter identical under the same seed
    head_w_.clear();
    head_b_.clear();
    for (int ch : site_ch) {
        Tensor hw = Tensor::zeros({hc, ch, 1, 1}, true);
        kaiming_uniform(hw, ch, rng);
        head_w_.push_back(hw);
        head_b_.push_back(Tensor::zeros({hc}, true));
    }
    if (cfg_.use_fsa) {
        fsa_.clear();
        for (int ch : site_ch) fsa_.emplace_back(ch, cfg_.fsa_r, cfg_.fsa_k, rng);
    }

    params_.clear();
    stem_.collect("backbone.stem", params_);
    d2_.collect("backbone.d2", params_);
    c2_.collect("backbone.c2", params_);
    d3_.collect("backbone.d3", params_);
    c3_.collect("backbone.c3", params_);
    d4_.collect("backbone.d4", params_);
    c4_.collect("backbone.c4", params_);
    d5_.collect("backbone.d5", params_);
    c5_.collect("backbone.c5", params_);
    sppf_.collect("backbone.sppf", params_);
    lat5_.collect("neck.lat5", params_);
    t4_.collect("neck.t4", params_);
    lat4_.collect("neck.lat4", params_);
    t3_.collect("neck.t3", params_);
    if (p2) {
        lat3_.collect("neck.lat3", params_);
        t2_.collect("neck.t2", params_);
        pan2_.collect("neck.pan2", params_);
        n3_.collect("neck.n3", params_);
    }
    pan3_.collect("neck.pan3", params_);
    n4_.collect("neck.n4", params_);
    pan4_.collect("neck.pan4", params_);
    n5_.collect("neck.n5", params_);
    for (size_t i = 0; i < fsa_.size(); ++i)
        fsa_[i].collect("neck.fsa_s" + std::to_string(strides[i]), params_);
    for (size_t i = 0; i < head_w_.size(); ++i) {
        const std::string p = "head.s" + std::to_string(strides[i]);
        params_.push_back({p + ".weight", head_w_[i], true, true});
        params_.push_back({p + ".bias", head_b_[i], true, false});
    }
}

Tensor Model::apply_fsa(size_t site, const Tensor& x, std::vector<Tensor>* maps) {
    if (!cfg_.use_fsa) return x;
    Tensor a = fsa_[site].attention_map(x);
    if (maps) maps->push_back(a);
    return mul(x, a);
}

std::vector<Tensor> Model::forward(const Tensor& images, bool training,
                                   std::vector<Tensor>* fsa_maps,
                                   std::vector<std::pair<std::string, double>>* timings) {
    if (!images.defined() || images.ndim() != 4 || images.dim(1) != 3 ||
        images.dim(2) != cfg_.input_size || images.dim(3) != cfg_.input_size)
        throw ShapeError("model: expected images (B,3," + std::to_string(cfg_.input_size) + "," +
                         std::to_string(cfg_.input_size) + "), got " +
                         (images.defined() ? shape_str(images.shape()) : std::string("undefined")));

    using clock = std::chrono::steady_clock;
    auto tick = clock::now();
    auto lap = [&](const char* name) {
        if (!timings) return;
        const auto now = clock::now();
        timings->emplace_back(name, std::chrono::duration<double>(now - tick).count());
        tick = now;
    };

    Tensor s0 = stem_.forward(images, training);
    lap("stem");
    Tensor f2 = c2_.forward(d2_.forward(s0, training), training);
    lap("stage_p2");
    Tensor f3 = c3_.forward(d3_.forward(f2, training), training);
    lap("stage_p3");
    Tensor f4 = c4_.forward(d4_.forward(f3, training), training);
    lap("stage_p4");
    Tensor f5 = sppf_.forward(c5_.forward(d5_.forward(f4, training), training), training);
    lap("stage_p5");

    Tensor a = lat5_.forward(f5, training);
    Tensor t4 = t4_.forward(concat({upsample_nearest2x(a), f4}, 1), training);
    lap("fpn_t4");
    Tensor b = lat4_.forward(t4, training);
    Tensor t3 = t3_.forward(concat({upsample_nearest2x(b), f3}, 1), training);
    lap("fpn_t3");

    std::vector<Tensor> site_maps;
    if (cfg_.use_p2_head) {
        Tensor c = lat3_.forward(t3, training);
        Tensor t2 = t2_.forward(concat({upsample_nearest2x(c), f2}, 1), training);
        lap("fpn_t2");
        Tensor o2 = apply_fsa(0, t2, fsa_maps);
        lap("fsa_s4");
        site_maps.push_back(o2);
        Tensor m3 = n3_.forward(concat({pan2_.forward(o2, training), c}, 1), training);
        lap("pan_n3");
        Tensor o3 = apply_fsa(1, m3, fsa_maps);
        site_maps.push_back(o3);
        Tensor m4 = n4_.forward(concat({pan3_.forward(o3, training), b}, 1), training);
        lap("pan_n4");
        Tensor o4 = apply_fsa(2, m4, fsa_maps);
        site_maps.push_back(o4);
        Tensor m5 = n5_.forward(concat({pan4_.forward(o4, training), a}, 1), training);
        lap("pan_n5");
        site_maps.push_back(apply_fsa(3, m5, fsa_maps));
        lap("fsa_rest");
    } else {
        Tensor o3 = apply_fsa(0, t3, fsa_maps);
        site_maps.push_back(o3);
        Tensor m4 = n4_.forward(concat({pan3_.forward(o3, training), b}, 1), training);
        Tensor o4 = apply_fsa(1, m4, fsa_maps);
        site_maps.push_back(o4);
        Tensor m5 = n5_.forward(concat({pan4_.forward(o4, training), a}, 1), training);
        site_maps.push_back(apply_fsa(2, m5, fsa_maps));
    }
    lap("neck");

    std::vector<Tensor> outs;
    outs.reserve(site_maps.size());
    for (size_t i = 0; i < site_maps.size(); ++i)
        outs.push_back(conv2d(site_maps[i], head_w_[i], head_b_[i], 1, 0));
    lap("heads");
    return outs;
}

int64_t Model::parameter_count() const {
    int64_t n = 0;
    for (const ParamEntry& p : params_)
        if (p.trainable) n += p.tensor.numel();
    return n;
}

int64_t expected_parameter_count(const ModelConfig& cfg) {
    const auto& w = cfg.widths;
    const bool p2 = cfg.use_p2_head;
    const int hc = cfg.head_channels();
    int64_t n = 0;
    n += ConvBlock::param_count(3, w[0], 3);
    n += ConvBlock::param_count(w[0], w[1], 3) + CspStage::param_count(w[1], w[1], cfg.depths[0]);
    n += ConvBlock::param_count(w[1], w[2], 3) + CspStage::param_count(w[2], w[2], cfg.depths[1]);
    n += ConvBlock::param_count(w[2], w[3], 3) + CspStage::param_count(w[3], w[3], cfg.depths[2]);
    n += ConvBlock::param_count(w[3], w[4], 3) +
         CspStage::param_count(w[4], w[4], cfg.depths[3], cfg.use_mhsa ? cfg.mhsa_heads : 0);
    n += Sppf::param_count(w[4], w[4]);
    n += ConvBlock::param_count(w[4], w[3], 1) + CspStage::param_count(2 * w[3], w[3], 1);
    n += ConvBlock::param_count(w[3], w[2], 1) + CspStage::param_count(2 * w[2], w[2], 1);
    if (p2) {
        n += ConvBlock::param_count(w[2], w[1], 1) + CspStage::param_count(2 * w[1], w[1], 1);
        n += ConvBlock::param_count(w[1], w[1], 3) + CspStage::param_count(2 * w[1], w[2], 1);
    }
    n += ConvBlock::param_count(w[2], w[2], 3) + CspStage::param_count(2 * w[2], w[3], 1);
    n += ConvBlock::param_count(w[3], w[3], 3) + CspStage::param_count(2 * w[3], w[4], 1);
    const std::vector<int> site = p2 ? std::vector<int>{w[1], w[2], w[3], w[4]}
                                     : std::vector<int>{w[2], w[3], w[4]};
    if (cfg.use_fsa)
        for (int ch : site) n += FsaModule::param_count(ch, cfg.fsa_r, cfg.fsa_k);
    for (int ch : site) n += static_cast<int64_t>(hc) * ch + hc;
    return n;
}

// ---------------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'F', 'S', 'A', 'D', 'E', 'T', '0', '1'};
constexpr uint32_t kVersion = 1;

void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <class T>
void write_pod(std::ostream& os, T v) {
    write_bytes(os, &v, sizeof(T));
}

void read_bytes(std::istream& is, void* p, size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is.gcount()) != n) throw CheckpointError("truncated checkpoint file");
}

template <class T>
T read_pod(std::istream& is) {
    T v;
    read_bytes(is, &v, sizeof(T));
    return v;
}

} // namespace

void Model::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint: " + path);
    write_bytes(os, kMagic, sizeof(kMagic));
    write_pod<uint32_t>(os, kVersion);
    const std::string cfg = cfg_.to_text();
    write_pod<uint64_t>(os, cfg.size());
    write_bytes(os, cfg.data(), cfg.size());
    write_pod<uint64_t>(os, cfg_.hash());
    write_pod<uint64_t>(os, params_.size());
    for (const ParamEntry& p : params_) {
        write_pod<uint64_t>(os, p.name.size());
        write_bytes(os, p.name.data(), p.name.size());
        write_pod<uint64_t>(os, static_cast<uint64_t>(p.tensor.numel()));
        write_bytes(os, p.tensor.data().data(), static_cast<size_t>(p.tensor.numel()) * sizeof(float));
    }
    if (!os) throw IoError("short write on checkpoint: " + path);
}

Model Model::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    read_bytes(is, magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw CheckpointError("not a checkpoint file: " + path);
    const uint32_t version = read_pod<uint32_t>(is);
    if (version != kVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const uint64_t cfg_len = read_pod<uint64_t>(is);
    if (cfg_len > (1u << 20)) throw CheckpointError("unreasonable config block size");
    std::string cfg_text(cfg_len, '\0');
    read_bytes(is, cfg_text.data(), cfg_len);
    const uint64_t stored_hash = read_pod<uint64_t>(is);

    ModelConfig cfg;
    try {
        cfg = ModelConfig::from_text(cfg_text);
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
    }
    if (cfg.hash() != stored_hash) throw CheckpointError("checkpoint config hash mismatch");

    Model m = Model::build(cfg, 0);
    std::unordered_map<std::string, Tensor*> by_name;
    for (ParamEntry& p : m.params_) by_name[p.name] = &p.tensor;

    const uint64_t n_arrays = read_pod<uint64_t>(is);
    if (n_arrays != m.params_.size())
        throw CheckpointError("checkpoint holds " + std::to_string(n_arrays) +
                              " arrays, model expects " + std::to_string(m.params_.size()));
    for (uint64_t i = 0; i < n_arrays; ++i) {
        const uint64_t name_len = read_pod<uint64_t>(is);
        if (name_len > 4096) throw CheckpointError("unreasonable parameter name length");
        std::string name(name_len, '\0');
        read_bytes(is, name.data(), name_len);
        const uint64_t numel = read_pod<uint64_t>(is);
        auto it = by_name.find(name);
        if (it == by_name.end()) throw CheckpointError("unknown parameter in checkpoint: " + name);
        if (numel != static_cast<uint64_t>(it->second->numel()))
            throw CheckpointError("parameter " + name + " holds " + std::to_string(numel) +
                                  " values, model expects " + std::to_string(it->second->numel()));
        read_bytes(is, it->second->data_mut().data(), numel * sizeof(float));
    }
    return m;
}

} // namespace fsa
