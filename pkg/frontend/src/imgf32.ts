/**
 * Tiny decoder for the service's raw image payloads: 16-byte header
 * ("URBC" magic + H, W, C little-endian u32) followed by float32 pixels,
 * row-major and channel-last. Thumbnails render client-side so the server
 * never needs an image-encoding path.
 */

export interface DecodedImage {
  height: number;
  width: number;
  channels: number;
  data: Float32Array;
}

const MAGIC = [0x55, 0x52, 0x42, 0x43]; // "URBC"

export function decodeImgf32(buffer: ArrayBuffer): DecodedImage {
  if (buffer.byteLength < 16) {
    throw new Error("imgf32 payload too short for its header");
  }
  const bytes = new Uint8Array(buffer, 0, 4);
  if (!MAGIC.every((b, i) => bytes[i] === b)) {
    throw new Error("bad imgf32 magic");
  }
  const header = new DataView(buffer, 4, 12);
  const height = header.getUint32(0, true);
  const width = header.getUint32(4, true);
  const channels = header.getUint32(8, true);
  const expected = 16 + height * width * channels * 4;
  if (buffer.byteLength !== expected) {
    throw new Error(`imgf32 payload length ${buffer.byteLength} != expected ${expected}`);
  }
  return {
    height,
    width,
    channels,
    data: new Float32Array(buffer, 16, height * width * channels),
  };
}

/** Convert to RGBA bytes suitable for a canvas ImageData buffer. */
export function toRgba(image: DecodedImage): Uint8ClampedArray {
  const { height, width, channels, data } = image;
  const out = new Uint8ClampedArray(height * width * 4);
  for (let p = 0; p < height * width; p++) {
    for (let c = 0; c < 3; c++) {
      const v = data[p * channels + Math.min(c, channels - 1)];
      out[p * 4 + c] = Math.round(Math.min(1, Math.max(0, v)) * 255);
    }
    out[p * 4 + 3] = 255;
  }
  return out;
}

export function drawToCanvas(image: DecodedImage, canvas: HTMLCanvasElement): void {
  canvas.width = image.width;
  canvas.height = image.height;
  const ctx = canvas.getContext("2d");
  if (!ctx) {
    return; // jsdom has no 2d context; tests cover decode + RGBA conversion
  }
  const imageData = ctx.createImageData(image.width, image.height);
  imageData.data.set(toRgba(image));
  ctx.putImageData(imageData, 0, 0);
}
