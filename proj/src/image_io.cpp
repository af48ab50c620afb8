#include "cvattn/image_io.hpp"

#include <zlib.h>

#include <cctype>
#include <cstring>
#include <fstream>

namespace cvattn {

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    atomic_write(path, [&](const std::string& tmp) {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot open for writing: " + tmp);
        os.write(reinterpret_cast<const char*>(bytes.data()),
                 static_cast<std::streamsize>(bytes.size()));
        if (!os) throw IoError("write failed: " + tmp);
    });
}

// --- PGM (P5) ---------------------------------------------------------------

// Skips whitespace and '#' comments between header tokens.
std::size_t next_token(const std::vector<std::uint8_t>& b, std::size_t pos, std::string& token,
                       const std::string& path) {
    while (pos < b.size()) {
        if (std::isspace(b[pos])) {
            ++pos;
        } else if (b[pos] == '#') {
            while (pos < b.size() && b[pos] != '\n') ++pos;
        } else {
            break;
        }
    }
    token.clear();
    while (pos < b.size() && !std::isspace(b[pos])) token.push_back(static_cast<char>(b[pos++]));
    if (token.empty()) throw IoError("truncated PGM header: " + path);
    return pos;
}

GrayImage load_pgm(const std::vector<std::uint8_t>& b, const std::string& path) {
    std::string tok;
    std::size_t pos = next_token(b, 0, tok, path);
    if (tok != "P5") throw IoError("unsupported PGM variant '" + tok + "' (P5 required): " + path);
    pos = next_token(b, pos, tok, path);
    const long w = std::stol(tok);
    pos = next_token(b, pos, tok, path);
    const long h = std::stol(tok);
    pos = next_token(b, pos, tok, path);
    const long maxval = std::stol(tok);
    if (w <= 0 || h <= 0) throw IoError("bad PGM dimensions: " + path);
    if (maxval <= 0 || maxval > 255) {
        throw IoError("unsupported PGM bit depth (maxval " + std::to_string(maxval) + "): " + path);
    }
    ++pos;  // single whitespace after maxval
    GrayImage g;
    g.w = w;
    g.h = h;
    const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    if (b.size() < pos + n) throw IoError("truncated PGM payload: " + path);
    g.pixels.assign(b.begin() + static_cast<std::ptrdiff_t>(pos),
                    b.begin() + static_cast<std::ptrdiff_t>(pos + n));
    return g;
}

// --- PNG --------------------------------------------------------------------

const std::uint8_t kPngSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_be32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
               const std::vector<std::uint8_t>& payload) {
    put_be32(out, static_cast<std::uint32_t>(payload.size()));
    const std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const uLong crc = crc32(0L, out.data() + crc_start, static_cast<uInt>(4 + payload.size()));
    put_be32(out, static_cast<std::uint32_t>(crc));
}

GrayImage load_png(const std::vector<std::uint8_t>& b, const std::string& path) {
    if (b.size() < 8 || std::memcmp(b.data(), kPngSig, 8) != 0) {
        throw IoError("bad PNG signature: " + path);
    }
    std::size_t pos = 8;
    bool have_ihdr = false;
    std::uint32_t w = 0, h = 0;
    std::vector<std::uint8_t> idat;
    while (pos + 8 <= b.size()) {
        const std::uint32_t len = get_be32(b.data() + pos);
        if (pos + 12 + len > b.size()) throw IoError("truncated PNG chunk: " + path);
        const char* type = reinterpret_cast<const char*>(b.data() + pos + 4);
        const std::uint8_t* payload = b.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw IoError("bad IHDR: " + path);
            w = get_be32(payload);
            h = get_be32(payload + 4);
            const std::uint8_t bit_depth = payload[8];
            const std::uint8_t color_type = payload[9];
            const std::uint8_t interlace = payload[12];
            if (bit_depth != 8 || color_type != 0) {
                throw IoError("unsupported PNG (need 8-bit grayscale, got depth " +
                              std::to_string(bit_depth) + " color type " +
                              std::to_string(color_type) + "): " + path);
            }
            if (interlace != 0) throw IoError("interlaced PNG unsupported: " + path);
            have_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (!have_ihdr || w == 0 || h == 0) throw IoError("missing IHDR: " + path);
    if (idat.empty()) throw IoError("missing IDAT: " + path);

    const std::size_t raw_size = static_cast<std::size_t>(h) * (static_cast<std::size_t>(w) + 1);
    std::vector<std::uint8_t> raw(raw_size);
    uLongf dest_len = static_cast<uLongf>(raw_size);
    const int rc = uncompress(raw.data(), &dest_len, idat.data(), static_cast<uLong>(idat.size()));
    if (rc != Z_OK || dest_len != raw_size) throw IoError("PNG inflate failed: " + path);

    GrayImage g;
    g.w = static_cast<Index>(w);
    g.h = static_cast<Index>(h);
    g.pixels.resize(static_cast<std::size_t>(w) * h);
    // bpp = 1: "left" is the previous byte, "up" the byte one scanline above.
    for (std::uint32_t y = 0; y < h; ++y) {
        const std::uint8_t filter = raw[y * (w + 1)];
        const std::uint8_t* src = raw.data() + y * (w + 1) + 1;
        std::uint8_t* dst = g.pixels.data() + static_cast<std::size_t>(y) * w;
        const std::uint8_t* up = y > 0 ? dst - w : nullptr;
        for (std::uint32_t x = 0; x < w; ++x) {
            const int a = x > 0 ? dst[x - 1] : 0;
            const int bb = up ? up[x] : 0;
            const int c = (x > 0 && up) ? up[x - 1] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += bb; break;
                case 3: v += (a + bb) / 2; break;
                case 4: {
                    const int p = a + bb - c;
                    const int pa = std::abs(p - a), pb = std::abs(p - bb), pc = std::abs(p - c);
                    v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? bb : c);
                    break;
                }
                default: throw IoError("unsupported PNG filter " + std::to_string(filter) + ": " + path);
            }
            dst[x] = static_cast<std::uint8_t>(v & 0xff);
        }
    }
    return g;
}

}  // namespace

GrayImage load_gray(const std::string& path) {
    const auto bytes = read_file(path);
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSig, 8) == 0) {
        return load_png(bytes, path);
    }
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') {
        return load_pgm(bytes, path);
    }
    throw IoError("unsupported image format (need PGM P5 or grayscale PNG): " + path);
}

void save_pgm(const GrayImage& img, const std::string& path) {
    std::vector<std::uint8_t> out;
    const std::string header =
        "P5\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    write_file(path, out);
}

void save_png(const GrayImage& img, const std::string& path) {
    if (img.w <= 0 || img.h <= 0 ||
        img.pixels.size() != static_cast<std::size_t>(img.w) * static_cast<std::size_t>(img.h)) {
        throw IoError("save_png: inconsistent raster for " + path);
    }
    std::vector<std::uint8_t> out(kPngSig, kPngSig + 8);
    std::vector<std::uint8_t> ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(img.w));
    put_be32(ihdr, static_cast<std::uint32_t>(img.h));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(0);   // color type: grayscale
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter method
    ihdr.push_back(0);   // no interlace
    put_chunk(out, "IHDR", ihdr);

    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(img.h) * (static_cast<std::size_t>(img.w) + 1));
    for (Index y = 0; y < img.h; ++y) {
        raw.push_back(0);  // filter type 0 on every scanline
        const std::uint8_t* row = img.pixels.data() + static_cast<std::size_t>(y) * img.w;
        raw.insert(raw.end(), row, row + img.w);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> compressed(bound);
    const int rc = compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6);
    if (rc != Z_OK) throw IoError("PNG deflate failed: " + path);
    compressed.resize(bound);
    put_chunk(out, "IDAT", compressed);
    put_chunk(out, "IEND", {});
    write_file(path, out);
}

void save_gray(const GrayImage& img, const std::string& path) {
    const auto dot = path.find_last_of('.');
    const std::string ext = dot == std::string::npos ? "" : path.substr(dot);
    if (ext == ".pgm") {
        save_pgm(img, path);
    } else {
        save_png(img, path);
    }
}

}  // namespace cvattn
