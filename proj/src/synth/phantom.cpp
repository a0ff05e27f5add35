// SPDX-License-Identifier: Apache-2.0

#include "tape/synth/phantom.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "tape/numeric/errors.hpp"
#include "tape/numeric/rng.hpp"

namespace tape::synth {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr char kMagic[8] = {'T', 'A', 'P', 'E', 'I', 'M', 'G', '1'};
constexpr std::uint64_t kHeaderBytes = 28;

// OCT base level per label; background (vitreous) is exactly 0 so speckle leaves it black.
constexpr std::array<double, kNumClasses> kOctLevel = {0.0, 0.85, 0.45, 0.65, 0.30, 0.95, 0.50};
constexpr double kOctaDim = 0.15;
// Labels carrying flow signal in the angiogram: superficial plexus, deep plexus, choroid.
constexpr std::array<int, 3> kVascularBands = {1, 3, 6};

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

Rng stream(std::uint64_t seed, std::uint64_t salt) { return Rng(splitmix(seed ^ splitmix(salt))); }

double raised_cosine(double x, double center, double half_width) {
    const double t = (x - center) / half_width;
    if (std::abs(t) >= 1.0) return 0.0;
    return 0.5 * (1.0 + std::cos(kPi * t));
}

struct Sinusoid {
    double amplitude;
    double frequency;  // cycles across the image width
    double phase;
    double eval(double x, double width) const {
        return amplitude * std::sin(2.0 * kPi * frequency * x / width + phase);
    }
};

struct Geometry {
    double top = 0.0;
    std::array<double, kNumSurfaces - 1> thickness{};  // bands 1..5; band 6 runs to the bottom
    double slope = 0.0;
    std::vector<Sinusoid> shared;
    std::array<Sinusoid, kNumSurfaces> wobble{};
};

Geometry draw_geometry(std::uint64_t seed, double h) {
    Rng rng = stream(seed, 1);
    Geometry g;
    g.top = h * rng.uniform(0.16, 0.22);
    constexpr std::array<double, kNumSurfaces - 1> base = {0.09, 0.09, 0.08, 0.08, 0.07};
    for (std::size_t k = 0; k < base.size(); ++k) g.thickness[k] = h * base[k] * rng.uniform(0.85, 1.15);
    g.slope = h * rng.uniform(-0.06, 0.06);
    const auto n_waves = 1 + rng.index(3);
    for (std::uint64_t i = 0; i < n_waves; ++i)
        g.shared.push_back({h * rng.uniform(0.0, 0.03), rng.uniform(0.3, 1.5), rng.uniform(0.0, 2.0 * kPi)});
    for (auto& w : g.wobble) w = {h * rng.uniform(0.0, 0.01), rng.uniform(0.5, 2.0), rng.uniform(0.0, 2.0 * kPi)};
    return g;
}

struct Ellipse {
    double cx, cy_frac, rx, ry;  // cy_frac: relative depth inside the inner bands
};

struct Lesion {
    double center = 0.0;
    double half_width = 0.0;
    double height = 0.0;          // AMD lift / RVO thickening, pixels
    std::vector<Ellipse> fluid;   // DR
    std::int64_t extra_dots = 0;  // DR
};

Lesion draw_lesion(std::uint64_t seed, Pathology p, double h, double w) {
    Rng rng = stream(seed, 3);
    Lesion l;
    switch (p) {
        case Pathology::Normal: break;
        case Pathology::AMD:
            l.half_width = w * rng.uniform(0.06, 0.12);
            l.center = rng.uniform(l.half_width, w - 1.0 - l.half_width);
            l.height = h * rng.uniform(0.06, 0.10);
            break;
        case Pathology::DR: {
            const auto n = 2 + rng.index(3);
            for (std::uint64_t i = 0; i < n; ++i)
                l.fluid.push_back({rng.uniform(0.1 * w, 0.9 * w), rng.uniform(0.25, 0.75), w * rng.uniform(0.03, 0.06),
                                   h * rng.uniform(0.015, 0.03)});
            l.extra_dots = static_cast<std::int64_t>(0.4 * w);
            break;
        }
        case Pathology::RVO:
            l.half_width = w * rng.uniform(0.15, 0.25);
            l.center = rng.uniform(l.half_width, w - 1.0 - l.half_width);
            l.height = h * rng.uniform(0.05, 0.08);
            break;
    }
    return l;
}

// Integer surface rows for one column, strictly increasing, inside [1, H-1].
std::array<std::int64_t, kNumSurfaces> column_surfaces(const Geometry& g, const Lesion& l, Pathology p, double x,
                                                       double w, std::int64_t height) {
    double shift = g.slope * (x / w - 0.5);
    for (const auto& s : g.shared) shift += s.eval(x, w);

    std::array<double, kNumSurfaces> s{};
    double depth = g.top;
    for (int k = 0; k < kNumSurfaces; ++k) {
        s[k] = depth + shift + g.wobble[k].eval(x, w);
        if (k < kNumSurfaces - 1) depth += g.thickness[k];
    }
    if (p == Pathology::AMD) {
        const double b = raised_cosine(x, l.center, l.half_width);
        s[4] -= l.height * b;        // RPE top lifted
        s[5] -= 0.6 * l.height * b;  // BM follows partially
    } else if (p == Pathology::RVO) {
        const double b = raised_cosine(x, l.center, l.half_width);
        s[1] += 0.6 * l.height * b;  // ILM band thickens
        for (int k = 2; k < kNumSurfaces; ++k) s[k] += l.height * b;  // IPL too
    }

    std::array<std::int64_t, kNumSurfaces> r{};
    for (int k = 0; k < kNumSurfaces; ++k) r[k] = std::llround(s[k]);
    r[0] = std::max<std::int64_t>(r[0], 1);
    for (int k = 1; k < kNumSurfaces; ++k) r[k] = std::max(r[k], r[k - 1] + 1);
    r[kNumSurfaces - 1] = std::min(r[kNumSurfaces - 1], height - 1);
    for (int k = kNumSurfaces - 2; k >= 0; --k) r[k] = std::min(r[k], r[k + 1] - 1);
    return r;
}

void check_dims(std::int64_t height, std::int64_t width) {
    if (height < min_phantom_height())
        throw ConfigError("phantom height " + std::to_string(height) + " too small to place six bands (minimum " +
                          std::to_string(min_phantom_height()) + ")");
    if (width < 1) throw ConfigError("phantom width must be positive");
}

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <typename U>
U get_le(std::span<const std::uint8_t> in, std::size_t offset) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(in[offset + i]) << (8 * i);
    return v;
}

}  // namespace

std::string_view pathology_name(Pathology p) {
    switch (p) {
        case Pathology::Normal: return "NORMAL";
        case Pathology::AMD: return "AMD";
        case Pathology::DR: return "DR";
        case Pathology::RVO: return "RVO";
    }
    return "UNKNOWN";
}

Pathology parse_pathology(std::string_view name) {
    for (auto p : kAllPathologies)
        if (pathology_name(p) == name) return p;
    throw ConfigError("unknown pathology '" + std::string(name) + "'");
}

std::int64_t min_phantom_height() { return 16; }

LesionExtent lesion_extent(std::uint64_t seed, Pathology pathology, std::int64_t height, std::int64_t width) {
    check_dims(height, width);
    if (pathology != Pathology::AMD && pathology != Pathology::RVO) return {};
    const auto l = draw_lesion(seed, pathology, static_cast<double>(height), static_cast<double>(width));
    const auto lo = static_cast<std::int64_t>(std::floor(l.center - l.half_width));
    const auto hi = static_cast<std::int64_t>(std::ceil(l.center + l.half_width)) + 1;
    return {std::clamp<std::int64_t>(lo, 0, width), std::clamp<std::int64_t>(hi, 0, width)};
}

PhantomSample gen_phantom(std::uint64_t seed, Pathology pathology, std::int64_t height, std::int64_t width) {
    check_dims(height, width);
    const double h = static_cast<double>(height);
    const double w = static_cast<double>(width);
    const auto geo = draw_geometry(seed, h);
    const auto lesion = draw_lesion(seed, pathology, h, w);
    const auto npix = static_cast<std::size_t>(height * width);

    PhantomSample out;
    out.height = height;
    out.width = width;
    out.pathology = pathology;
    out.seed = seed;
    out.labels.assign(npix, 0);

    std::vector<std::array<std::int64_t, kNumSurfaces>> surfaces(static_cast<std::size_t>(width));
    for (std::int64_t x = 0; x < width; ++x) {
        const auto r = column_surfaces(geo, lesion, pathology, static_cast<double>(x), w, height);
        surfaces[static_cast<std::size_t>(x)] = r;
        for (std::int64_t y = 0; y < height; ++y) {
            std::uint8_t label = 0;
            for (int k = 0; k < kNumSurfaces; ++k)
                if (y >= r[k]) label = static_cast<std::uint8_t>(k + 1);
            out.labels[static_cast<std::size_t>(y * width + x)] = label;
        }
    }

    // Lesion attenuation (labels unchanged): DR fluid pockets, RVO shadow wedge.
    std::vector<double> attenuation(npix, 1.0);
    for (const auto& e : lesion.fluid) {
        const auto& r = surfaces[static_cast<std::size_t>(std::clamp<std::int64_t>(std::llround(e.cx), 0, width - 1))];
        const double cy = r[0] + e.cy_frac * static_cast<double>(r[3] - r[0]);
        for (std::int64_t y = 0; y < height; ++y)
            for (std::int64_t x = 0; x < width; ++x) {
                const double dx = (static_cast<double>(x) - e.cx) / e.rx;
                const double dy = (static_cast<double>(y) - cy) / e.ry;
                const auto i = static_cast<std::size_t>(y * width + x);
                if (dx * dx + dy * dy <= 1.0 && out.labels[i] >= 1 && out.labels[i] <= 3) attenuation[i] = 0.25;
            }
    }
    if (pathology == Pathology::RVO) {
        const auto apex = surfaces[static_cast<std::size_t>(std::llround(lesion.center))][0];
        for (std::int64_t y = apex; y < height; ++y)
            for (std::int64_t x = 0; x < width; ++x) {
                const double spread = 0.35 * static_cast<double>(y - apex);
                if (std::abs(static_cast<double>(x) - lesion.center) <= spread)
                    attenuation[static_cast<std::size_t>(y * width + x)] *= 0.4;
            }
    }

    Rng noise = stream(seed, 2);
    std::vector<float> oct(npix), octa(npix);
    for (std::size_t i = 0; i < npix; ++i) {
        const double level = kOctLevel[out.labels[i]] * attenuation[i];
        oct[i] = static_cast<float>(std::clamp(level * noise.uniform(0.7, 1.3), 0.0, 1.0));
    }
    for (std::size_t i = 0; i < npix; ++i) {
        const double level = kOctaDim * kOctLevel[out.labels[i]];
        octa[i] = static_cast<float>(std::clamp(level * noise.uniform(0.7, 1.3), 0.0, 1.0));
    }

    // Flow signal: short vertical streaks inside the vascular bands.
    auto place_dots = [&](Rng& rng, std::int64_t count) {
        for (std::int64_t d = 0; d < count; ++d) {
            const auto x = static_cast<std::int64_t>(rng.index(static_cast<std::uint64_t>(width)));
            const int band = kVascularBands[rng.index(kVascularBands.size())];
            const auto length = static_cast<std::int64_t>(1 + rng.index(3));
            const double intensity = rng.uniform(0.6, 1.0);
            const auto& r = surfaces[static_cast<std::size_t>(x)];
            const std::int64_t lo = r[band - 1];
            const std::int64_t hi = band < kNumSurfaces ? r[band] : height;
            const auto y0 = lo + static_cast<std::int64_t>(rng.index(static_cast<std::uint64_t>(hi - lo)));
            for (std::int64_t y = y0; y < std::min(hi, y0 + length); ++y)
                octa[static_cast<std::size_t>(y * width + x)] = static_cast<float>(intensity);
        }
    };
    Rng flow = stream(seed, 4);
    place_dots(flow, static_cast<std::int64_t>(0.6 * w));
    if (lesion.extra_dots > 0) {
        Rng extra = stream(seed, 5);
        place_dots(extra, lesion.extra_dots);
    }

    out.oct = Tensor({1, height, width}, std::move(oct));
    out.octa = Tensor({1, height, width}, std::move(octa));
    return out;
}

std::uint64_t sample_file_size(std::int64_t height, std::int64_t width) {
    const auto n = static_cast<std::uint64_t>(height * width);
    return kHeaderBytes + 2 * 4 * n + n;
}

std::vector<std::uint8_t> encode_sample(const PhantomSample& s) {
    const auto n = static_cast<std::size_t>(s.height * s.width);
    if (s.oct.numel() != static_cast<std::int64_t>(n) || s.octa.numel() != static_cast<std::int64_t>(n) ||
        s.labels.size() != n)
        throw ShapeError("encode_sample: image and label sizes disagree with " + std::to_string(s.height) + "x" +
                         std::to_string(s.width));
    std::vector<std::uint8_t> out;
    out.reserve(static_cast<std::size_t>(sample_file_size(s.height, s.width)));
    for (char ch : kMagic) out.push_back(static_cast<std::uint8_t>(ch));
    put_le(out, static_cast<std::uint32_t>(s.height));
    put_le(out, static_cast<std::uint32_t>(s.width));
    put_le(out, static_cast<std::uint32_t>(s.pathology));
    put_le(out, s.seed);
    for (float v : s.oct.data()) put_le(out, std::bit_cast<std::uint32_t>(v));
    for (float v : s.octa.data()) put_le(out, std::bit_cast<std::uint32_t>(v));
    out.insert(out.end(), s.labels.begin(), s.labels.end());
    return out;
}

PhantomSample decode_sample(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kHeaderBytes) throw FormatError("TAPEIMG1: truncated header");
    if (std::memcmp(bytes.data(), kMagic, 7) != 0) throw FormatError("TAPEIMG1: bad magic");
    if (bytes[7] != static_cast<std::uint8_t>(kMagic[7]))
        throw FormatError(std::string("TAPEIMG1: unsupported version '") + static_cast<char>(bytes[7]) + "'");
    PhantomSample s;
    s.height = get_le<std::uint32_t>(bytes, 8);
    s.width = get_le<std::uint32_t>(bytes, 12);
    const auto code = get_le<std::uint32_t>(bytes, 16);
    if (code > 3) throw FormatError("TAPEIMG1: unknown pathology code " + std::to_string(code));
    s.pathology = static_cast<Pathology>(code);
    s.seed = get_le<std::uint64_t>(bytes, 20);
    if (s.height == 0 || s.width == 0) throw FormatError("TAPEIMG1: zero image size");
    const auto expected = sample_file_size(s.height, s.width);
    if (bytes.size() != expected)
        throw FormatError("TAPEIMG1: expected " + std::to_string(expected) + " bytes, got " +
                          std::to_string(bytes.size()));
    const auto n = static_cast<std::size_t>(s.height * s.width);
    std::vector<float> oct(n), octa(n);
    std::size_t off = kHeaderBytes;
    for (auto& v : oct) v = std::bit_cast<float>(get_le<std::uint32_t>(bytes, off)), off += 4;
    for (auto& v : octa) v = std::bit_cast<float>(get_le<std::uint32_t>(bytes, off)), off += 4;
    s.labels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.end());
    for (auto l : s.labels)
        if (l >= kNumClasses) throw FormatError("TAPEIMG1: label " + std::to_string(l) + " out of range");
    s.oct = Tensor({1, s.height, s.width}, std::move(oct));
    s.octa = Tensor({1, s.height, s.width}, std::move(octa));
    return s;
}

void save_sample(const PhantomSample& sample, const std::filesystem::path& path) {
    const auto bytes = encode_sample(sample);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

PhantomSample load_sample(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    try {
        return decode_sample(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

namespace {
void write_p5(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels, std::int64_t height,
              std::int64_t width) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << "P5\n" << width << ' ' << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!f) throw IoError("write failed: " + path.string());
}
}  // namespace

void write_pgm(const std::filesystem::path& path, std::span<const float> values, std::int64_t height,
               std::int64_t width) {
    if (static_cast<std::int64_t>(values.size()) != height * width) throw ShapeError("write_pgm: size mismatch");
    std::vector<std::uint8_t> px(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
        px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(static_cast<double>(values[i]), 0.0, 1.0) * 255.0));
    write_p5(path, px, height, width);
}

void write_label_pgm(const std::filesystem::path& path, std::span<const std::uint8_t> labels, std::int64_t height,
                     std::int64_t width) {
    if (static_cast<std::int64_t>(labels.size()) != height * width) throw ShapeError("write_label_pgm: size mismatch");
    write_p5(path, {labels.begin(), labels.end()}, height, width);
}

}  // namespace tape::synth
