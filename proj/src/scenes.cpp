// SPDX-License-Identifier: Apache-2.0
#include "slotmerge/scenes.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "slotmerge/rng.hpp"

namespace slotmerge {

void SceneSpec::validate() const {
    if (height == 0 || width == 0) throw SceneSpecError("canvas must be nonempty");
    if (min_objects < 1 || max_objects < min_objects)
        throw SceneSpecError("object count range invalid");
    if (min_size < 2 || max_size < min_size) throw SceneSpecError("size range invalid");
    if (max_size > height || max_size > width)
        throw SceneSpecError("object larger than canvas");
    if (shapes.empty()) throw SceneSpecError("no shapes configured");
    if (palette.empty()) throw SceneSpecError("empty palette");
}

namespace {

struct PlacedObject {
    ShapeKind kind;
    double cx, cy, extent;
    std::array<double, 3> color;
};

bool covers(const PlacedObject& o, std::size_t px, std::size_t py) {
    // pixel centers at (px + 0.5, py + 0.5)
    const double x = static_cast<double>(px) + 0.5;
    const double y = static_cast<double>(py) + 0.5;
    const double half = o.extent / 2.0;
    switch (o.kind) {
        case ShapeKind::kCircle: {
            const double dx = x - o.cx, dy = y - o.cy;
            return dx * dx + dy * dy <= half * half;
        }
        case ShapeKind::kSquare:
            return std::fabs(x - o.cx) <= half && std::fabs(y - o.cy) <= half;
        case ShapeKind::kTriangle: {
            // isoceles triangle, apex up: base at cy+half, apex at cy-half
            const double ty = y - (o.cy - half);
            if (ty < 0.0 || ty > o.extent) return false;
            const double allowed = half * (ty / o.extent);
            return std::fabs(x - o.cx) <= allowed;
        }
    }
    return false;
}

void rasterize(const PlacedObject& o, std::size_t h, std::size_t w,
               std::vector<bool>& mask) {
    mask.assign(h * w, false);
    const double half = o.extent / 2.0;
    const std::size_t y0 = static_cast<std::size_t>(std::max(0.0, o.cy - half - 1.0));
    const std::size_t y1 = std::min(h, static_cast<std::size_t>(o.cy + half + 2.0));
    const std::size_t x0 = static_cast<std::size_t>(std::max(0.0, o.cx - half - 1.0));
    const std::size_t x1 = std::min(w, static_cast<std::size_t>(o.cx + half + 2.0));
    for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x)
            if (covers(o, x, y)) mask[y * w + x] = true;
}

}  // namespace

SceneSample generate_scene(const SceneSpec& spec, std::uint64_t sample_seed) {
    spec.validate();
    Rng rng(sample_seed);
    const std::size_t h = spec.height, w = spec.width;
    const std::size_t n_objects =
        static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(spec.min_objects),
                                                 static_cast<std::int64_t>(spec.max_objects)));

    std::vector<PlacedObject> objects;
    std::vector<std::vector<bool>> object_masks;
    for (std::size_t i = 0; i < n_objects; ++i) {
        PlacedObject obj;
        std::vector<bool> mask;
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            obj.kind = spec.shapes[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(spec.shapes.size()) - 1))];
            obj.extent = rng.uniform(static_cast<double>(spec.min_size),
                                     static_cast<double>(spec.max_size));
            const double half = obj.extent / 2.0;
            obj.cx = rng.uniform(half, static_cast<double>(w) - half);
            obj.cy = rng.uniform(half, static_cast<double>(h) - half);
            obj.color = spec.palette[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(spec.palette.size()) - 1))];
            rasterize(obj, h, w, mask);
            if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; }))
                continue;  // degenerate rasterization, retry
            if (!spec.allow_occlusion) {
                bool overlaps = false;
                for (const auto& other : object_masks) {
                    for (std::size_t p = 0; p < mask.size() && !overlaps; ++p)
                        overlaps = mask[p] && other[p];
                    if (overlaps) break;
                }
                if (overlaps) continue;
            }
            placed = true;
        }
        if (!placed)
            throw SceneSpecError("could not place object without occlusion");
        objects.push_back(obj);
        object_masks.push_back(std::move(mask));
    }

    SceneSample sample;
    sample.height = h;
    sample.width = w;
    sample.image.assign(h * w * 3, 0.0);
    std::vector<std::uint32_t> raw_instance(h * w, 0);

    // painter's order: object i drawn over objects < i
    for (std::size_t i = 0; i < objects.size(); ++i) {
        const auto& mask = object_masks[i];
        for (std::size_t p = 0; p < h * w; ++p) {
            if (!mask[p]) continue;
            raw_instance[p] = static_cast<std::uint32_t>(i + 1);
            sample.image[p * 3 + 0] = objects[i].color[0];
            sample.image[p * 3 + 1] = objects[i].color[1];
            sample.image[p * 3 + 2] = objects[i].color[2];
        }
    }

    // compact labels over visible objects, preserving draw order
    std::vector<std::uint32_t> relabel(objects.size() + 1, 0);
    std::uint32_t next = 1;
    for (std::size_t i = 1; i <= objects.size(); ++i) {
        const bool visible =
            std::any_of(raw_instance.begin(), raw_instance.end(),
                        [&](std::uint32_t v) { return v == i; });
        if (visible) relabel[i] = next++;
    }

    sample.instances.height = h;
    sample.instances.width = w;
    sample.instances.labels.resize(h * w);
    sample.classes.height = h;
    sample.classes.width = w;
    sample.classes.labels.resize(h * w);
    for (std::size_t p = 0; p < h * w; ++p) {
        const std::uint32_t raw = raw_instance[p];
        sample.instances.labels[p] = raw == 0 ? 0 : relabel[raw];
        sample.classes.labels[p] =
            raw == 0 ? 0 : static_cast<std::uint32_t>(objects[raw - 1].kind);
    }
    sample.n_objects = next - 1;
    return sample;
}

std::vector<SceneSample> generate_scenes(const SceneSpec& spec, std::size_t count) {
    spec.validate();
    std::vector<SceneSample> samples;
    samples.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        samples.push_back(generate_scene(spec, derive_seed(spec.seed, i)));
    return samples;
}

// --------------------------------------------------------------- file I/O

namespace {

void write_u16_le(std::ostream& out, std::uint16_t v) {
    const unsigned char bytes[2] = {static_cast<unsigned char>(v & 0xff),
                                    static_cast<unsigned char>(v >> 8)};
    out.write(reinterpret_cast<const char*>(bytes), 2);
}

std::uint16_t read_u16_le(std::istream& in) {
    unsigned char bytes[2];
    in.read(reinterpret_cast<char*>(bytes), 2);
    return static_cast<std::uint16_t>(bytes[0] | (bytes[1] << 8));
}

void write_f32_le(std::ostream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    unsigned char bytes[4];
    for (int b = 0; b < 4; ++b) bytes[b] = static_cast<unsigned char>(bits >> (8 * b));
    out.write(reinterpret_cast<const char*>(bytes), 4);
}

float read_f32_le(std::istream& in) {
    unsigned char bytes[4];
    in.read(reinterpret_cast<char*>(bytes), 4);
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[b]) << (8 * b);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace

void save_scenes(const std::string& path, const std::vector<SceneSample>& samples) {
    if (samples.empty()) throw DataError("save_scenes: no samples");
    const std::size_t h = samples.front().height, w = samples.front().width;
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw FormatError("cannot open dataset file for writing: " + tmp);
        out << "SCENES v1 " << samples.size() << " " << h << " " << w << "\n";
        for (const SceneSample& s : samples) {
            if (s.height != h || s.width != w)
                throw DataError("save_scenes: mixed canvas sizes");
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t p = 0; p < h * w; ++p)
                    write_f32_le(out, static_cast<float>(s.image[p * 3 + c]));
            for (std::size_t p = 0; p < h * w; ++p)
                write_u16_le(out, static_cast<std::uint16_t>(s.instances.labels[p]));
            for (std::size_t p = 0; p < h * w; ++p)
                write_u16_le(out, static_cast<std::uint16_t>(s.classes.labels[p]));
        }
        if (!out) throw FormatError("failed writing dataset payload: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

std::vector<SceneSample> load_scenes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open dataset file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw FormatError("dataset header truncated");
    std::istringstream header(line);
    std::string magic, version;
    std::size_t count = 0, h = 0, w = 0;
    header >> magic >> version >> count >> h >> w;
    if (magic != "SCENES" || version != "v1")
        throw FormatError("unknown dataset format: " + line);
    if (count == 0 || h == 0 || w == 0) throw FormatError("bad dataset header: " + line);

    std::vector<SceneSample> samples;
    samples.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        SceneSample sample;
        sample.height = h;
        sample.width = w;
        sample.image.assign(h * w * 3, 0.0);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t p = 0; p < h * w; ++p)
                sample.image[p * 3 + c] = static_cast<double>(read_f32_le(in));
        sample.instances.height = h;
        sample.instances.width = w;
        sample.instances.labels.resize(h * w);
        std::uint32_t max_label = 0;
        for (std::size_t p = 0; p < h * w; ++p) {
            sample.instances.labels[p] = read_u16_le(in);
            max_label = std::max(max_label, sample.instances.labels[p]);
        }
        sample.classes.height = h;
        sample.classes.width = w;
        sample.classes.labels.resize(h * w);
        for (std::size_t p = 0; p < h * w; ++p)
            sample.classes.labels[p] = read_u16_le(in);
        if (!in) throw FormatError("dataset payload truncated at sample " +
                                   std::to_string(s));
        sample.n_objects = max_label;
        samples.push_back(std::move(sample));
    }
    return samples;
}

SceneSpec load_scene_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open scene spec: " + path);
    SceneSpec spec;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            bool blank = true;
            for (char ch : line) blank = blank && std::isspace(static_cast<unsigned char>(ch));
            if (blank) continue;
            throw FormatError("scene spec line " + std::to_string(line_no) +
                              ": expected key=value");
        }
        auto trim = [](std::string t) {
            const auto b = t.find_first_not_of(" \t\r");
            const auto e = t.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : t.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            if (key == "height") spec.height = std::stoul(value);
            else if (key == "width") spec.width = std::stoul(value);
            else if (key == "min_objects") spec.min_objects = std::stoul(value);
            else if (key == "max_objects") spec.max_objects = std::stoul(value);
            else if (key == "min_size") spec.min_size = std::stoul(value);
            else if (key == "max_size") spec.max_size = std::stoul(value);
            else if (key == "allow_occlusion") spec.allow_occlusion = value == "true" || value == "1";
            else if (key == "seed") spec.seed = std::stoull(value);
            else if (key == "shapes") {
                spec.shapes.clear();
                std::istringstream list(value);
                std::string item;
                while (std::getline(list, item, ',')) {
                    item = trim(item);
                    if (item == "circle") spec.shapes.push_back(ShapeKind::kCircle);
                    else if (item == "square") spec.shapes.push_back(ShapeKind::kSquare);
                    else if (item == "triangle") spec.shapes.push_back(ShapeKind::kTriangle);
                    else throw FormatError("unknown shape: " + item);
                }
            } else {
                throw FormatError("unknown scene spec key: " + key);
            }
        } catch (const std::invalid_argument&) {
            throw FormatError("scene spec line " + std::to_string(line_no) + ": bad value");
        }
    }
    return spec;
}

}  // namespace slotmerge
