/* Name-service contract guest.
 *
 * Freestanding wasm32 build, no libc.  Mirrors the host-native
 * name-service handler operation for operation so the two produce
 * identical events, storage writes and gas receipts for identical
 * messages.
 *
 * ABI (module "env"):
 *   storage_get(k, klen, v, vcap) -> written | -1 absent
 *   storage_set(k, klen, v, vlen)
 *   nn_build_from_cache(id, len) -> graph | -status
 *   nn_init_ctx(graph, mode, max_tokens) -> ctx | -status
 *   nn_set_input(ctx, index, p, len) -> 0 | status
 *   nn_compute(ctx) -> 0 | status
 *   nn_get_output(ctx, index, p, cap) -> written | -status
 *
 * execute(msg, len) receives canonical JSON and returns a pointer to
 * [u32 little-endian length][result JSON].  Result is either
 * {"events":[[k,v],...]} or {"error":"..."}.
 */

typedef unsigned char u8;
typedef unsigned int u32;
typedef unsigned long long u64;
typedef int i32;

#define WASM_EXPORT(n) __attribute__((export_name(n)))
#define WASM_IMPORT(n) __attribute__((import_module("env"), import_name(n)))

WASM_IMPORT("storage_get")
extern i32 storage_get(const u8 *k, u32 klen, u8 *v, u32 vcap);
WASM_IMPORT("storage_set")
extern void storage_set(const u8 *k, u32 klen, const u8 *v, u32 vlen);
WASM_IMPORT("nn_build_from_cache")
extern i32 nn_build_from_cache(const u8 *id, u32 len);
WASM_IMPORT("nn_init_ctx")
extern i32 nn_init_ctx(i32 graph, i32 mode, i32 max_tokens);
WASM_IMPORT("nn_set_input")
extern i32 nn_set_input(i32 ctx, i32 index, const u8 *p, u32 len);
WASM_IMPORT("nn_compute")
extern i32 nn_compute(i32 ctx);
WASM_IMPORT("nn_get_output")
extern i32 nn_get_output(i32 ctx, i32 index, u8 *p, u32 cap);

/* The compiler is free to emit calls to these for aggregate moves. */
void *memcpy(void *dst, const void *src, unsigned long n) {
    u8 *d = (u8 *)dst;
    const u8 *s = (const u8 *)src;
    for (unsigned long i = 0; i < n; i++) d[i] = s[i];
    return dst;
}

void *memset(void *dst, int c, unsigned long n) {
    u8 *d = (u8 *)dst;
    for (unsigned long i = 0; i < n; i++) d[i] = (u8)c;
    return dst;
}

/* ---- bump allocator ---------------------------------------------------- */

extern unsigned char __heap_base;
static u32 heap_top;

WASM_EXPORT("alloc")
u8 *guest_alloc(u32 n) {
    if (heap_top == 0) heap_top = (u32)&__heap_base;
    heap_top = (heap_top + 7u) & ~7u;
    u8 *p = (u8 *)heap_top;
    heap_top += n;
    while (heap_top > (__builtin_wasm_memory_size(0) << 16)) {
        if (__builtin_wasm_memory_grow(0, 1) == (u32)-1) __builtin_trap();
    }
    return p;
}

/* ---- sha256 ------------------------------------------------------------ */

static const u32 K256[64] = {
    0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1,
    0x923f82a4, 0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3,
    0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786,
    0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
    0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147,
    0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13,
    0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
    0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
    0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a,
    0x5b9cca4f, 0x682e6ff3, 0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208,
    0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2};

static u32 rotr32(u32 x, u32 n) { return (x >> n) | (x << (32 - n)); }

static void sha256_block(u32 h[8], const u8 *p) {
    u32 w[64];
    for (int i = 0; i < 16; i++)
        w[i] = ((u32)p[4 * i] << 24) | ((u32)p[4 * i + 1] << 16) |
               ((u32)p[4 * i + 2] << 8) | (u32)p[4 * i + 3];
    for (int i = 16; i < 64; i++) {
        u32 s0 = rotr32(w[i - 15], 7) ^ rotr32(w[i - 15], 18) ^ (w[i - 15] >> 3);
        u32 s1 = rotr32(w[i - 2], 17) ^ rotr32(w[i - 2], 19) ^ (w[i - 2] >> 10);
        w[i] = w[i - 16] + s0 + w[i - 7] + s1;
    }
    u32 a = h[0], b = h[1], c = h[2], d = h[3];
    u32 e = h[4], f = h[5], g = h[6], hh = h[7];
    for (int i = 0; i < 64; i++) {
        u32 s1 = rotr32(e, 6) ^ rotr32(e, 11) ^ rotr32(e, 25);
        u32 ch = (e & f) ^ (~e & g);
        u32 t1 = hh + s1 + ch + K256[i] + w[i];
        u32 s0 = rotr32(a, 2) ^ rotr32(a, 13) ^ rotr32(a, 22);
        u32 mj = (a & b) ^ (a & c) ^ (b & c);
        u32 t2 = s0 + mj;
        hh = g; g = f; f = e; e = d + t1;
        d = c; c = b; b = a; a = t1 + t2;
    }
    h[0] += a; h[1] += b; h[2] += c; h[3] += d;
    h[4] += e; h[5] += f; h[6] += g; h[7] += hh;
}

static void sha256(const u8 *msg, u32 len, u8 out[32]) {
    u32 h[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
    u32 i = 0;
    for (; i + 64 <= len; i += 64) sha256_block(h, msg + i);
    u8 tail[128];
    u32 rem = len - i;
    memcpy(tail, msg + i, rem);
    tail[rem] = 0x80;
    u32 pad = (rem < 56) ? 64 : 128;
    memset(tail + rem + 1, 0, pad - rem - 1 - 8);
    u64 bits = (u64)len * 8;
    for (int j = 0; j < 8; j++) tail[pad - 1 - j] = (u8)(bits >> (8 * j));
    sha256_block(h, tail);
    if (pad == 128) sha256_block(h, tail + 64);
    for (int j = 0; j < 8; j++) {
        out[4 * j] = (u8)(h[j] >> 24);
        out[4 * j + 1] = (u8)(h[j] >> 16);
        out[4 * j + 2] = (u8)(h[j] >> 8);
        out[4 * j + 3] = (u8)h[j];
    }
}

/* ---- canonical JSON input ---------------------------------------------- */

static const u8 *P, *END;

static int eat(u8 c) {
    if (P < END && *P == c) {
        P++;
        return 1;
    }
    return 0;
}

static int hex_val(u8 c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
}

static int read_u16_hex(u32 *out) {
    u32 v = 0;
    for (int i = 0; i < 4; i++) {
        if (P >= END) return 0;
        int d = hex_val(*P++);
        if (d < 0) return 0;
        v = (v << 4) | (u32)d;
    }
    *out = v;
    return 1;
}

static int put_utf8(u8 *out, u32 cap, u32 *n, u32 cp) {
    u32 need = cp < 0x80 ? 1 : cp < 0x800 ? 2 : cp < 0x10000 ? 3 : 4;
    if (*n + need > cap) return 0;
    if (cp < 0x80) {
        out[(*n)++] = (u8)cp;
    } else if (cp < 0x800) {
        out[(*n)++] = (u8)(0xC0 | (cp >> 6));
        out[(*n)++] = (u8)(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
        out[(*n)++] = (u8)(0xE0 | (cp >> 12));
        out[(*n)++] = (u8)(0x80 | ((cp >> 6) & 0x3F));
        out[(*n)++] = (u8)(0x80 | (cp & 0x3F));
    } else {
        out[(*n)++] = (u8)(0xF0 | (cp >> 18));
        out[(*n)++] = (u8)(0x80 | ((cp >> 12) & 0x3F));
        out[(*n)++] = (u8)(0x80 | ((cp >> 6) & 0x3F));
        out[(*n)++] = (u8)(0x80 | (cp & 0x3F));
    }
    return 1;
}

static int parse_string(u8 *out, u32 cap, u32 *outlen) {
    u32 n = 0;
    if (!eat('"')) return 0;
    while (P < END) {
        u8 c = *P++;
        if (c == '"') {
            *outlen = n;
            return 1;
        }
        if (c != '\\') {
            if (n >= cap) return 0;
            out[n++] = c;
            continue;
        }
        if (P >= END) return 0;
        u8 e = *P++;
        u8 lit;
        switch (e) {
        case '"': lit = '"'; break;
        case '\\': lit = '\\'; break;
        case '/': lit = '/'; break;
        case 'b': lit = 8; break;
        case 'f': lit = 12; break;
        case 'n': lit = 10; break;
        case 'r': lit = 13; break;
        case 't': lit = 9; break;
        case 'u': {
            u32 cp;
            if (!read_u16_hex(&cp)) return 0;
            if (cp >= 0xD800 && cp < 0xDC00) {
                /* surrogate pair */
                u32 lo;
                if (!eat('\\') || !eat('u') || !read_u16_hex(&lo)) return 0;
                if (lo < 0xDC00 || lo > 0xDFFF) return 0;
                cp = 0x10000 + ((cp - 0xD800) << 10) + (lo - 0xDC00);
            } else if (cp >= 0xDC00 && cp <= 0xDFFF) {
                return 0;
            }
            if (!put_utf8(out, cap, &n, cp)) return 0;
            continue;
        }
        default: return 0;
        }
        if (n >= cap) return 0;
        out[n++] = lit;
    }
    return 0;
}

static int parse_uint(u32 *out) {
    u32 v = 0;
    int any = 0;
    while (P < END && *P >= '0' && *P <= '9') {
        v = v * 10 + (u32)(*P++ - '0');
        any = 1;
        if (v > 1000000) return 0;
    }
    *out = v;
    return any;
}

static int str_eq(const u8 *a, u32 alen, const char *b) {
    u32 i = 0;
    for (; b[i]; i++)
        if (i >= alen || a[i] != (u8)b[i]) return 0;
    return i == alen;
}

static int expect_key(const char *want) {
    u8 buf[24];
    u32 n;
    if (!parse_string(buf, sizeof buf, &n)) return 0;
    if (!str_eq(buf, n, want)) return 0;
    return eat(':');
}

/* ---- result JSON output ------------------------------------------------ */

static u8 result_buf[4 + 12288];
static u32 wlen;

static void emit(u8 c) {
    if (4 + wlen >= sizeof result_buf) __builtin_trap();
    result_buf[4 + wlen++] = c;
}

static void emit_raw(const char *s) {
    for (u32 i = 0; s[i]; i++) emit((u8)s[i]);
}

static const char HEX[17] = "0123456789abcdef";

static u32 c_strlen(const char *s) {
    u32 n = 0;
    while (s[n]) n++;
    return n;
}

static void emit_jstr(const u8 *s, u32 n) {
    emit('"');
    for (u32 i = 0; i < n; i++) {
        u8 c = s[i];
        if (c == '"' || c == '\\') {
            emit('\\');
            emit(c);
        } else if (c < 0x20) {
            emit_raw("\\u00");
            emit((u8)HEX[c >> 4]);
            emit((u8)HEX[c & 15]);
        } else {
            emit(c);
        }
    }
    emit('"');
}

static void emit_pair(const char *k, const u8 *v, u32 vlen) {
    emit('[');
    emit_jstr((const u8 *)k, c_strlen(k));
    emit(',');
    emit_jstr(v, vlen);
    emit(']');
}

static u8 *finish(void) {
    result_buf[0] = (u8)wlen;
    result_buf[1] = (u8)(wlen >> 8);
    result_buf[2] = (u8)(wlen >> 16);
    result_buf[3] = (u8)(wlen >> 24);
    return result_buf;
}

static u8 *fail(const char *code) {
    wlen = 0;
    emit_raw("{\"error\":\"");
    emit_raw(code);
    emit_raw("\"}");
    return finish();
}

/* ---- message handling --------------------------------------------------- */

static u8 name_buf[80];
static u32 name_len;
static u8 value_buf[1104];
static u32 value_len;
static u8 model_buf[80];
static u32 model_len;
static u8 stored[1104];
static u8 prompt[1280];
static u8 out_tokens[1000];
static u8 infer_key[96];
static u8 digest_hex[64];

static u8 *do_register(void) {
    storage_set(name_buf, name_len, value_buf, value_len);
    wlen = 0;
    emit_raw("{\"events\":[");
    emit_pair("action", (const u8 *)"register", 8);
    emit(',');
    emit_pair("name", name_buf, name_len);
    emit_raw("]}");
    return finish();
}

static u8 *do_resolve(void) {
    i32 got = storage_get(name_buf, name_len, stored, sizeof stored);
    if (got < 0) return fail("name-not-found");
    wlen = 0;
    emit_raw("{\"events\":[");
    emit_pair("action", (const u8 *)"resolve", 7);
    emit(',');
    emit_pair("name", name_buf, name_len);
    emit(',');
    emit_pair("value", stored, (u32)got);
    emit_raw("]}");
    return finish();
}

static u8 *do_infer(u32 mode, u32 max_tokens) {
    i32 got = storage_get(name_buf, name_len, stored, sizeof stored);
    if (got < 0) return fail("name-not-found");

    u32 plen = 0;
    memcpy(prompt + plen, "name:", 5);
    plen += 5;
    memcpy(prompt + plen, name_buf, name_len);
    plen += name_len;
    memcpy(prompt + plen, " value:", 7);
    plen += 7;
    memcpy(prompt + plen, stored, (u32)got);
    plen += (u32)got;

    i32 graph = nn_build_from_cache(model_buf, model_len);
    if (graph < 0) return fail("nn-failed");
    i32 ctx = nn_init_ctx(graph, (i32)mode, (i32)max_tokens);
    if (ctx < 0) return fail("nn-failed");
    if (nn_set_input(ctx, 0, prompt, plen) != 0) return fail("nn-failed");
    if (nn_compute(ctx) != 0) return fail("nn-failed");
    i32 written = nn_get_output(ctx, 0, out_tokens, sizeof out_tokens);
    if (written < 0) return fail("nn-failed");

    u8 digest[32];
    sha256(out_tokens, (u32)written, digest);
    for (int i = 0; i < 32; i++) {
        digest_hex[2 * i] = (u8)HEX[digest[i] >> 4];
        digest_hex[2 * i + 1] = (u8)HEX[digest[i] & 15];
    }
    memcpy(infer_key, "infer/", 6);
    memcpy(infer_key + 6, name_buf, name_len);
    storage_set(infer_key, 6 + name_len, digest_hex, 64);

    wlen = 0;
    emit_raw("{\"events\":[");
    emit_pair("action", (const u8 *)"infer", 5);
    emit(',');
    emit_pair("name", name_buf, name_len);
    emit(',');
    emit_pair("model_id", model_buf, model_len);
    emit(',');
    emit_pair("digest", digest_hex, 64);
    emit_raw("]}");
    return finish();
}

WASM_EXPORT("execute")
u8 *execute(const u8 *msg, u32 len) {
    P = msg;
    END = msg + len;

    u8 tag[24];
    u32 tag_len;
    if (!eat('{') || !parse_string(tag, sizeof tag, &tag_len) || !eat(':') ||
        !eat('{'))
        __builtin_trap();

    if (str_eq(tag, tag_len, "register")) {
        if (!expect_key("name") ||
            !parse_string(name_buf, sizeof name_buf, &name_len) || !eat(',') ||
            !expect_key("value") ||
            !parse_string(value_buf, sizeof value_buf, &value_len) ||
            !eat('}') || !eat('}') || P != END)
            __builtin_trap();
        return do_register();
    }
    if (str_eq(tag, tag_len, "resolve")) {
        if (!expect_key("name") ||
            !parse_string(name_buf, sizeof name_buf, &name_len) || !eat('}') ||
            !eat('}') || P != END)
            __builtin_trap();
        return do_resolve();
    }
    if (str_eq(tag, tag_len, "infer_from_name")) {
        u32 max_tokens, mode;
        u8 mode_buf[12];
        u32 mode_len;
        if (!expect_key("max_tokens") || !parse_uint(&max_tokens) ||
            !eat(',') || !expect_key("mode") ||
            !parse_string(mode_buf, sizeof mode_buf, &mode_len) || !eat(',') ||
            !expect_key("model_id") ||
            !parse_string(model_buf, sizeof model_buf, &model_len) ||
            !eat(',') || !expect_key("name") ||
            !parse_string(name_buf, sizeof name_buf, &name_len) || !eat('}') ||
            !eat('}') || P != END)
            __builtin_trap();
        if (str_eq(mode_buf, mode_len, "greedy"))
            mode = 0;
        else if (str_eq(mode_buf, mode_len, "sampled"))
            mode = 1;
        else
            __builtin_trap();
        return do_infer(mode, max_tokens);
    }
    __builtin_trap();
}
