#include "fsa/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fsa/rng.hpp"

namespace fs = std::filesystem;

namespace fsa {

GroundTruthBox to_pixel_box(const GroundTruth& gt, int image_size) {
    const float s = static_cast<float>(image_size);
    return {gt.class_id, gt.cx * s, gt.cy * s, gt.w * s, gt.h * s};
}

void SceneSpec::validate() const {
    if (image_size < 32) throw ConfigError("image_size: must be >= 32");
    if (min_devices < 0 || max_devices < min_devices)
        throw ConfigError("device count: need 0 <= min_devices <= max_devices");
    if (!(scale_min > 0 && scale_max >= scale_min && scale_max <= 1))
        throw ConfigError("scale range: need 0 < scale_min <= scale_max <= 1");
    if (!(tiny_min > 0 && tiny_max >= tiny_min && tiny_max <= 1))
        throw ConfigError("tiny range: need 0 < tiny_min <= tiny_max <= 1");
    if (tiny_fraction < 0 || tiny_fraction > 1) throw ConfigError("tiny_fraction: must be in [0,1]");
    if (clutter_density < 0 || clutter_density > 1)
        throw ConfigError("clutter_density: must be in [0,1]");
    if (light_jitter < 0 || light_jitter > 0.9f)
        throw ConfigError("light_jitter: must be in [0,0.9]");
    if (num_classes < 1 || num_classes > 8) throw ConfigError("num_classes: must be in [1,8]");
}

SceneSpec SceneSpec::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open scene spec: " + path);
    SceneSpec s;
    std::string line;
    int lineno = 0;
    auto want_float = [](const std::string& v, const std::string& key) {
        try {
            size_t pos = 0;
            float r = std::stof(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ConfigError(key + ": expected a number, got '" + v + "'");
        }
    };
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = line;
        t.erase(0, t.find_first_not_of(" \t\r\n"));
        if (!t.empty()) t.erase(t.find_last_not_of(" \t\r\n") + 1);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        std::string key = t.substr(0, eq);
        key.erase(key.find_last_not_of(" \t") + 1);
        std::string val = t.substr(eq + 1);
        val.erase(0, val.find_first_not_of(" \t"));
        if (key == "image_size")
            s.image_size = static_cast<int>(want_float(val, key));
        else if (key == "min_devices")
            s.min_devices = static_cast<int>(want_float(val, key));
        else if (key == "max_devices")
            s.max_devices = static_cast<int>(want_float(val, key));
        else if (key == "scale_min")
            s.scale_min = want_float(val, key);
        else if (key == "scale_max")
            s.scale_max = want_float(val, key);
        else if (key == "tiny_min")
            s.tiny_min = want_float(val, key);
        else if (key == "tiny_max")
            s.tiny_max = want_float(val, key);
        else if (key == "tiny_fraction")
            s.tiny_fraction = want_float(val, key);
        else if (key == "clutter_density")
            s.clutter_density = want_float(val, key);
        else if (key == "light_jitter")
            s.light_jitter = want_float(val, key);
        else if (key == "num_classes")
            s.num_classes = static_cast<int>(want_float(val, key));
        else if (key == "seed")
            s.seed = static_cast<uint64_t>(want_float(val, key));
        else
            throw ConfigError("scene spec: unknown key '" + key + "'");
    }
    s.validate();
    return s;
}

std::vector<std::string> default_class_names(int num_classes) {
    static const char* kNames[3] = {"box_device", "orb_device", "tri_device"};
    std::vector<std::string> out;
    for (int i = 0; i < num_classes; ++i)
        out.push_back(i < 3 ? kNames[i] : "device_" + std::to_string(i));
    return out;
}

namespace {

struct ColorU8 {
    float r, g, b;
};

// class identity = shape + dominant channel; clutter stays near-gray so the
// two populations are separable by channel dominance
ColorU8 device_color(int class_id, Rng& rng) {
    const float dom = rng.uniform(170.0f, 250.0f);
    const float l1 = rng.uniform(20.0f, 75.0f);
    const float l2 = rng.uniform(20.0f, 75.0f);
    switch (class_id % 3) {
        case 0: return {dom, l1, l2};
        case 1: return {l1, dom, l2};
        default: return {l1, l2, dom};
    }
}

struct Placed {
    float cx, cy, w, h; // normalized
};

float norm_iou(const Placed& a, const Placed& b) {
    return box_iou(a.cx, a.cy, a.w, a.h, b.cx, b.cy, b.w, b.h);
}

enum class DevShape { Rect, Ellipse, Triangle };

bool inside_shape(DevShape s, float px, float py, float x0, float y0, float x1, float y1) {
    if (px < x0 || px >= x1 || py < y0 || py >= y1) return false;
    switch (s) {
        case DevShape::Rect:
            return true;
        case DevShape::Ellipse: {
            const float rx = (x1 - x0) * 0.5f, ry = (y1 - y0) * 0.5f;
            const float dx = (px - (x0 + rx)) / rx, dy = (py - (y0 + ry)) / ry;
            return dx * dx + dy * dy <= 1.0f;
        }
        case DevShape::Triangle: {
            // apex at top-center, base along the bottom edge
            const float t = (py - y0) / (y1 - y0); // 0 at apex row, 1 at base
            const float half = 0.5f * t * (x1 - x0);
            const float mid = 0.5f * (x0 + x1);
            return px >= mid - half && px <= mid + half;
        }
    }
    return false;
}

} // namespace

ImageU8 render_scene(const SceneSpec& spec, uint64_t image_index, std::vector<GroundTruth>& labels) {
    Rng rng(mix_seed(spec.seed, image_index));
    const int S = spec.image_size;
    std::vector<float> canvas(static_cast<size_t>(S) * S * 3);

    // background: muted gray with mild vertical shading
    const float base = rng.uniform(60.0f, 140.0f);
    const float shade = rng.uniform(-20.0f, 20.0f);
    for (int y = 0; y < S; ++y) {
        const float v = base + shade * (static_cast<float>(y) / S - 0.5f);
        for (int x = 0; x < S; ++x) {
            float* p = canvas.data() + 3 * (static_cast<size_t>(y) * S + x);
            p[0] = v;
            p[1] = v;
            p[2] = v;
        }
    }

    // clutter: near-gray rectangles and streaks (channel ratio stays small)
    const int nClutter = static_cast<int>(spec.clutter_density * 24.0f);
    for (int i = 0; i < nClutter; ++i) {
        const float g = rng.uniform(35.0f, 210.0f);
        const float spreadA = rng.uniform(0.88f, 1.12f);
        const float spreadB = rng.uniform(0.88f, 1.12f);
        const float cr = g, cg = g * spreadA, cb = g * spreadB;
        const int cw = rng.range(2, S / 3);
        const int ch = rng.chance(0.3f) ? rng.range(1, 3) : rng.range(2, S / 3);
        const int x0 = rng.range(0, S - 1);
        const int y0 = rng.range(0, S - 1);
        for (int y = y0; y < std::min(S, y0 + ch); ++y)
            for (int x = x0; x < std::min(S, x0 + cw); ++x) {
                float* p = canvas.data() + 3 * (static_cast<size_t>(y) * S + x);
                p[0] = cr;
                p[1] = cg;
                p[2] = cb;
            }
    }

    // devices
    labels.clear();
    std::vector<Placed> placed;
    const int count = rng.range(spec.min_devices, spec.max_devices);
    for (int d = 0; d < count; ++d) {
        const int cls = static_cast<int>(rng.below(static_cast<uint32_t>(spec.num_classes)));
        const bool tiny = rng.chance(spec.tiny_fraction);
        const float lo = tiny ? spec.tiny_min : spec.scale_min;
        const float hi = tiny ? spec.tiny_max : spec.scale_max;
        const float w = rng.uniform(lo, hi);
        const float h = std::clamp(w * rng.uniform(0.65f, 1.55f), 0.5f * lo, 1.6f * hi);

        Placed pl{0, 0, w, h};
        for (int attempt = 0; attempt < 12; ++attempt) {
            pl.cx = rng.uniform(w * 0.5f + 0.01f, 1.0f - w * 0.5f - 0.01f);
            pl.cy = rng.uniform(h * 0.5f + 0.01f, 1.0f - h * 0.5f - 0.01f);
            bool clear = true;
            for (const Placed& other : placed)
                if (norm_iou(pl, other) > 0.2f) clear = false;
            if (clear) break;
        }
        placed.push_back(pl);

        const DevShape shape = static_cast<DevShape>(cls % 3);
        const ColorU8 col = device_color(cls, rng);
        const int pattern = rng.range(0, 2); // 0 solid, 1 h-stripes, 2 checker
        const int period = rng.range(2, 4);
        const float x0 = (pl.cx - w * 0.5f) * S, x1 = (pl.cx + w * 0.5f) * S;
        const float y0 = (pl.cy - h * 0.5f) * S, y1 = (pl.cy + h * 0.5f) * S;
        const int ix0 = std::max(0, static_cast<int>(std::floor(x0)));
        const int iy0 = std::max(0, static_cast<int>(std::floor(y0)));
        const int ix1 = std::min(S - 1, static_cast<int>(std::ceil(x1)));
        const int iy1 = std::min(S - 1, static_cast<int>(std::ceil(y1)));
        for (int y = iy0; y <= iy1; ++y)
            for (int x = ix0; x <= ix1; ++x) {
                if (!inside_shape(shape, x + 0.5f, y + 0.5f, x0, y0, x1, y1)) continue;
                float mul = 1.0f;
                if (pattern == 1 && (y / period) % 2 == 1) mul = 0.85f;
                if (pattern == 2 && ((x / period) + (y / period)) % 2 == 1) mul = 0.85f;
                float* p = canvas.data() + 3 * (static_cast<size_t>(y) * S + x);
                p[0] = col.r * mul;
                p[1] = col.g * mul;
                p[2] = col.b * mul;
            }

        labels.push_back({cls, pl.cx, pl.cy, w, h});
    }

    // global brightness jitter; scaling all channels equally preserves hue
    const float light = 1.0f + rng.uniform(-spec.light_jitter, spec.light_jitter);
    ImageU8 img;
    img.width = S;
    img.height = S;
    img.rgb.resize(canvas.size());
    for (size_t i = 0; i < canvas.size(); ++i) {
        const float v = canvas[i] * light;
        img.rgb[i] = static_cast<uint8_t>(std::clamp(v, 0.0f, 255.0f));
    }
    return img;
}

void generate(const SceneSpec& spec, int count, const std::string& out_dir) {
    spec.validate();
    if (count < 1) throw ContractError("generate: count must be >= 1");
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    fs::create_directories(fs::path(out_dir) / "labels", ec);
    if (ec) throw IoError("cannot create dataset directories under " + out_dir);

    {
        std::ofstream cls(fs::path(out_dir) / "classes.txt");
        if (!cls) throw IoError("cannot write classes.txt under " + out_dir);
        for (const std::string& n : default_class_names(spec.num_classes)) cls << n << '\n';
    }

    std::string err; // exceptions must not escape the parallel region
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < count; ++i) {
        try {
            std::vector<GroundTruth> labels;
            ImageU8 img = render_scene(spec, static_cast<uint64_t>(i), labels);
            char stem[32];
            std::snprintf(stem, sizeof(stem), "img_%06d", i);
            write_ppm((fs::path(out_dir) / "images" / (std::string(stem) + ".ppm")).string(), img);
            std::ofstream lf(fs::path(out_dir) / "labels" / (std::string(stem) + ".txt"));
            if (!lf) throw IoError(std::string("cannot write label file for ") + stem);
            for (const GroundTruth& gt : labels) {
                char line[128];
                std::snprintf(line, sizeof(line), "%d %.6f %.6f %.6f %.6f\n", gt.class_id, gt.cx,
                              gt.cy, gt.w, gt.h);
                lf << line;
            }
        } catch (const std::exception& e) {
#pragma omp critical
            if (err.empty()) err = e.what();
        }
    }
    if (!err.empty()) throw IoError(err);
}

namespace {

std::vector<GroundTruth> parse_label_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open label file: " + path);
    std::vector<GroundTruth> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = line;
        t.erase(0, t.find_first_not_of(" \t\r\n"));
        if (!t.empty()) t.erase(t.find_last_not_of(" \t\r\n") + 1);
        if (t.empty()) continue;
        GroundTruth gt;
        char extra;
        const int got = std::sscanf(t.c_str(), "%d %f %f %f %f %c", &gt.class_id, &gt.cx, &gt.cy,
                                    &gt.w, &gt.h, &extra);
        const std::string where = path + ":" + std::to_string(lineno);
        if (got != 5) throw IoError(where + ": expected 'class cx cy w h', got '" + t + "'");
        if (gt.class_id < 0) throw IoError(where + ": negative class id");
        if (!(gt.w > 0 && gt.w <= 1 && gt.h > 0 && gt.h <= 1))
            throw IoError(where + ": box size outside (0,1]");
        const float eps = 5e-4f;
        if (gt.cx - gt.w / 2 < -eps || gt.cx + gt.w / 2 > 1 + eps || gt.cy - gt.h / 2 < -eps ||
            gt.cy + gt.h / 2 > 1 + eps)
            throw IoError(where + ": box extends outside the unit square");
        out.push_back(gt);
    }
    return out;
}

} // namespace

Tensor image_to_tensor(const ImageU8& img) {
    std::vector<float> chw(3 * static_cast<size_t>(img.width) * img.height);
    const size_t plane = static_cast<size_t>(img.width) * img.height;
    for (size_t px = 0; px < plane; ++px) {
        chw[px] = static_cast<float>(img.rgb[3 * px]) / 255.0f;
        chw[plane + px] = static_cast<float>(img.rgb[3 * px + 1]) / 255.0f;
        chw[2 * plane + px] = static_cast<float>(img.rgb[3 * px + 2]) / 255.0f;
    }
    return Tensor({3, img.height, img.width}, std::move(chw));
}

Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    const fs::path root(dir);
    if (!fs::exists(root)) return ds;

    const fs::path cls = root / "classes.txt";
    if (fs::exists(cls)) {
        std::ifstream in(cls);
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (!line.empty()) ds.class_names.push_back(line);
        }
    }

    std::vector<fs::path> image_files;
    if (fs::exists(root / "images"))
        for (const auto& e : fs::directory_iterator(root / "images"))
            if (e.is_regular_file() && e.path().extension() == ".ppm") image_files.push_back(e.path());
    std::sort(image_files.begin(), image_files.end());

    int max_class = -1;
    for (const fs::path& ip : image_files) {
        Sample s;
        s.stem = ip.stem().string();
        s.image = image_to_tensor(read_ppm(ip.string()));
        const fs::path lp = root / "labels" / (s.stem + ".txt");
        if (fs::exists(lp)) s.labels = parse_label_file(lp.string());
        for (const GroundTruth& gt : s.labels) max_class = std::max(max_class, gt.class_id);
        ds.samples.push_back(std::move(s));
    }
    if (ds.class_names.empty() && max_class >= 0)
        ds.class_names = default_class_names(max_class + 1);
    for (const Sample& s : ds.samples)
        for (const GroundTruth& gt : s.labels)
            if (gt.class_id >= ds.num_classes())
                throw IoError(dir + ": label class id " + std::to_string(gt.class_id) +
                              " exceeds class count " + std::to_string(ds.num_classes()));
    return ds;
}

} // namespace fsa
